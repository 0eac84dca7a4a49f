"""Dense fields on regular grids.

Scalar volumes are plain arrays of shape ``spatial``; vector fields are
channel-first arrays of shape ``(d, *spatial)`` holding voxel-unit values.
A *map* is a vector field whose value at ``x`` is a position, so the
identity map is :func:`identity_grid`.
"""

import itertools

import numpy as np

from ._validation import check_field, check_spacing, check_volume


def identity_grid(shape):
    """Voxel coordinates of a grid, shape ``(d, *shape)``."""
    return np.indices(tuple(shape), dtype=np.float64)


def _split_field(field, d):
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == d:
        return field[None], True
    if field.ndim == d + 1:
        return field, False
    raise ValueError(
        f"field with {field.ndim} axes cannot be sampled by {d}-D coordinates")


def _cell_weights(coords, shape):
    """Lower corner index, fractional offset and in-range mask per axis."""
    lower, frac, inside = [], [], []
    for axis, n in enumerate(shape):
        c = coords[axis]
        cc = np.clip(c, 0.0, n - 1)
        i0 = np.floor(cc).astype(np.intp)
        if n > 1:
            np.minimum(i0, n - 2, out=i0)
        lower.append(i0)
        frac.append(cc - i0)
        inside.append((c >= 0.0) & (c <= n - 1) if n > 1 else np.zeros(c.shape, bool))
    return lower, frac, inside


def _corners(d):
    return itertools.product((0, 1), repeat=d)


def sample_linear(field, coords):
    """Multilinear interpolation of ``field`` at ``coords``.

    Parameters
    ----------
    field : ndarray
        Scalar volume ``spatial`` or channel-first field ``(C, *spatial)``.
    coords : ndarray, shape (d, *out_shape)
        Voxel coordinates to sample at. Coordinates outside ``[0, N-1]`` are
        clamped to the border.

    Returns
    -------
    ndarray
        ``out_shape`` for scalar input, ``(C, *out_shape)`` otherwise.
    """
    coords = np.asarray(coords, dtype=np.float64)
    d = coords.shape[0]
    data, scalar = _split_field(field, d)
    shape = data.shape[1:]
    lower, frac, _ = _cell_weights(coords, shape)
    out = np.zeros((data.shape[0],) + coords.shape[1:])
    for bits in _corners(d):
        w = np.ones(coords.shape[1:])
        idx = []
        for a, b in enumerate(bits):
            w = w * (frac[a] if b else 1.0 - frac[a])
            idx.append(np.minimum(lower[a] + b, shape[a] - 1))
        out += w * data[(slice(None),) + tuple(idx)]
    return out[0] if scalar else out


def sample_linear_vjp(field, coords, grad_out, need_field=True, need_coords=True):
    """Adjoint of :func:`sample_linear` applied to ``grad_out``.

    Returns ``(grad_field, grad_coords)``; either may be ``None`` when not
    requested. The coordinate derivative is zero along clamped axes and
    uses the lower-cell (forward difference) convention at integer points.
    """
    coords = np.asarray(coords, dtype=np.float64)
    d = coords.shape[0]
    data, scalar = _split_field(field, d)
    g = np.asarray(grad_out, dtype=np.float64)
    if scalar:
        g = g[None]
    shape = data.shape[1:]
    nvox = int(np.prod(shape))
    lower, frac, inside = _cell_weights(coords, shape)
    grad_field = np.zeros((data.shape[0], nvox)) if need_field else None
    grad_coords = np.zeros(coords.shape) if need_coords else None
    for bits in _corners(d):
        factors = [frac[a] if b else 1.0 - frac[a] for a, b in enumerate(bits)]
        idx = tuple(np.minimum(lower[a] + b, shape[a] - 1) for a, b in enumerate(bits))
        w = np.prod(factors, axis=0) if d > 1 else factors[0]
        if need_field:
            flat = np.ravel_multi_index(idx, shape).ravel()
            for c in range(data.shape[0]):
                grad_field[c] += np.bincount(flat, weights=(w * g[c]).ravel(),
                                             minlength=nvox)
        if need_coords:
            vals = np.sum(data[(slice(None),) + idx] * g, axis=0)
            for a in range(d):
                dw = np.ones(coords.shape[1:]) if bits[a] else -np.ones(coords.shape[1:])
                for b in range(d):
                    if b != a:
                        dw = dw * factors[b]
                grad_coords[a] += dw * vals
    if need_coords:
        for a in range(d):
            grad_coords[a] *= inside[a]
    if need_field:
        grad_field = grad_field.reshape(data.shape)
        if scalar:
            grad_field = grad_field[0]
    return grad_field, grad_coords


def sample_nearest(field, coords):
    """Nearest-neighbour lookup with border clamping (label warping)."""
    field = np.asarray(field)
    coords = np.asarray(coords, dtype=np.float64)
    idx = tuple(np.clip(np.rint(coords[a]), 0, n - 1).astype(np.intp)
                for a, n in enumerate(field.shape[-coords.shape[0]:]))
    if field.ndim == coords.shape[0]:
        return field[idx]
    return field[(slice(None),) + idx]


def central_diff(a, axis):
    """Central differences along ``axis``, one-sided on the two end rows."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[axis]
    if n < 2:
        raise ValueError(f"axis {axis} has size {n}; finite differences need >= 2")
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = 0.5 * (a[2:] - a[:-2])
    out[0] = a[1] - a[0]
    out[-1] = a[-1] - a[-2]
    return np.moveaxis(out, 0, axis)


def central_diff_adjoint(g, axis):
    """Transpose of :func:`central_diff`."""
    g = np.moveaxis(np.asarray(g, dtype=np.float64), axis, 0)
    r = np.zeros_like(g)
    r[2:] += 0.5 * g[1:-1]
    r[:-2] -= 0.5 * g[1:-1]
    r[1] += g[0]
    r[0] -= g[0]
    r[-1] += g[-1]
    r[-2] -= g[-1]
    return np.moveaxis(r, 0, axis)


def gradient_central(volume, spacing=None):
    """Spatial gradient of a scalar volume, shape ``(d, *spatial)``."""
    volume = check_volume(volume, min_size=2)
    sp = check_spacing(spacing, volume.ndim)
    return np.stack([central_diff(volume, a) / sp[a] for a in range(volume.ndim)])


def jacobian_matrix(phi):
    """Per-voxel matrix ``J[i, j] = d phi_i / d x_j`` of a map."""
    phi = check_field(phi, "map", min_size=2)
    d = phi.shape[0]
    return np.stack([np.stack([central_diff(phi[i], j) for j in range(d)])
                     for i in range(d)])


def _det_and_cofactor(J):
    d = J.shape[0]
    if d == 1:
        return J[0, 0], np.ones_like(J)
    if d == 2:
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        cof = np.stack([np.stack([J[1, 1], -J[1, 0]]),
                        np.stack([-J[0, 1], J[0, 0]])])
        return det, cof
    if d == 3:
        cof = np.empty_like(J)
        for i in range(3):
            for j in range(3):
                r = [k for k in range(3) if k != i]
                c = [k for k in range(3) if k != j]
                minor = J[r[0], c[0]] * J[r[1], c[1]] - J[r[0], c[1]] * J[r[1], c[0]]
                cof[i, j] = minor if (i + j) % 2 == 0 else -minor
        det = np.sum(J[0] * cof[0], axis=0)
        return det, cof
    raise ValueError(f"unsupported dimension {d}")


def jacobian_det(phi):
    """Determinant of the central-difference Jacobian of a map.

    Parameters
    ----------
    phi : ndarray, shape (d, *spatial)
        Map in voxel coordinates, every spatial axis of size >= 2.

    Returns
    -------
    ndarray, shape spatial
    """
    det, _ = _det_and_cofactor(jacobian_matrix(phi))
    return det


def jacobian_det_vjp(phi, grad_det):
    """Gradient of ``sum(grad_det * jacobian_det(phi))`` with respect to ``phi``."""
    J = jacobian_matrix(phi)
    _, cof = _det_and_cofactor(J)
    d = J.shape[0]
    out = np.zeros_like(np.asarray(phi, dtype=np.float64))
    for i in range(d):
        for j in range(d):
            out[i] += central_diff_adjoint(grad_det * cof[i, j], j)
    return out
