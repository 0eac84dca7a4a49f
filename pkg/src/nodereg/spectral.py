"""The smoothing operator ``K = (gamma - alpha * Laplacian)^s`` in Fourier space.

The Laplacian is the standard (2d+1)-point discrete stencil with periodic
boundaries, so ``K`` is diagonalized by the DFT. Norms use the voxel-mean
convention ``||f||^2 = mean_x sum_c f_c(x)^2``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_field, check_spacing


@dataclass(frozen=True)
class KernelSpec:
    """Parameters of ``(gamma - alpha * Laplacian)^s`` on a fixed grid."""

    shape: tuple
    gamma: float = 1.0
    alpha: float = 5e-4
    s: int = 1
    spacing: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if int(self.s) != self.s or self.s < 1:
            raise ValueError(f"s must be a positive integer, got {self.s}")
        sp = check_spacing(self.spacing, len(self.shape))
        object.__setattr__(self, "spacing", tuple(float(x) for x in sp))


def build_multiplier(spec):
    """Symbol of ``K`` on the DFT grid of ``spec.shape``.

    ``K_hat(k) = (gamma + alpha * sum_i (2 - 2 cos(2 pi k_i / N_i)) / h_i^2)^s``
    """
    lap = np.zeros(spec.shape)
    for axis, (n, h) in enumerate(zip(spec.shape, spec.spacing)):
        k = np.arange(n)
        sym = (2.0 - 2.0 * np.cos(2.0 * np.pi * k / n)) / h ** 2
        shape = [1] * len(spec.shape)
        shape[axis] = n
        lap = lap + sym.reshape(shape)
    return (spec.gamma + spec.alpha * lap) ** spec.s


def apply_stencil(f, spec):
    """Apply ``gamma - alpha * Laplacian_h`` once in the spatial domain (periodic)."""
    f = np.asarray(f, dtype=np.float64)
    nd = len(spec.shape)
    lead = f.ndim - nd
    out = spec.gamma * f
    for axis, h in enumerate(spec.spacing):
        ax = lead + axis
        lap = np.roll(f, 1, axis=ax) - 2.0 * f + np.roll(f, -1, axis=ax)
        out = out - spec.alpha * lap / h ** 2
    return out


def _check(v, spec):
    v = check_field(v, "velocity")
    if tuple(v.shape[1:]) != spec.shape:
        raise ValueError(f"field shape {v.shape[1:]} does not match kernel {spec.shape}")
    return v


def _axes(spec):
    return tuple(range(1, len(spec.shape) + 1))


def smooth_inverse_KtK(v, spec, multiplier=None):
    """Solve ``(K* K) u = v`` channelwise under periodic boundaries."""
    v = _check(v, spec)
    kh = build_multiplier(spec) if multiplier is None else multiplier
    vh = np.fft.fftn(v, axes=_axes(spec))
    return np.real(np.fft.ifftn(vh / kh ** 2, axes=_axes(spec)))


def apply_KtK(v, spec, multiplier=None):
    """Apply ``K* K`` channelwise."""
    v = _check(v, spec)
    kh = build_multiplier(spec) if multiplier is None else multiplier
    vh = np.fft.fftn(v, axes=_axes(spec))
    return np.real(np.fft.ifftn(vh * kh ** 2, axes=_axes(spec)))


def v_norm_sq(v, spec, multiplier=None):
    """``||K v||^2`` in the voxel-mean L2 convention.

    Computed from the spectrum: ``sum_k K_hat^2 |v_hat|^2 / N^2`` with
    ``N`` the voxel count (numpy's unnormalized forward DFT).
    """
    v = _check(v, spec)
    kh = build_multiplier(spec) if multiplier is None else multiplier
    vh = np.fft.fftn(v, axes=_axes(spec))
    n = float(np.prod(spec.shape))
    return float(np.sum(kh ** 2 * (vh.real ** 2 + vh.imag ** 2)) / n ** 2)


def v_norm_sq_grad(v, spec, multiplier=None):
    """Gradient of :func:`v_norm_sq` with respect to the array entries of ``v``.

    Equals ``2 (K* K) v / N``; the ``1/N`` is the voxel-mean measure.
    """
    n = float(np.prod(spec.shape))
    return 2.0 * apply_KtK(v, spec, multiplier) / n


def v_inner(v, w, spec, multiplier=None):
    """``<K* K v, w>`` in the voxel-mean convention."""
    w = _check(w, spec)
    return float(np.sum(apply_KtK(v, spec, multiplier) * w) / np.prod(spec.shape))
