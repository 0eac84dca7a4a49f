"""Modality-agnostic dissimilarities between a warped image and a fixed image.

Each metric returns ``(value, grad)`` where ``grad`` is the derivative of
the value with respect to the first (warped) image.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_same_shape, check_volume
from .descriptor import SearchScheme, mind_backward, mind_forward


def mind_mse(Iw, I1, scheme=None, fixed_descriptor=None):
    """Mean squared difference of MIND descriptors.

    Parameters
    ----------
    Iw, I1 : ndarray
        Warped moving image and fixed image of equal shape.
    scheme : SearchScheme, optional
    fixed_descriptor : ndarray, optional
        Precomputed ``mind(I1)``; skips recomputation inside optimization loops.

    Returns
    -------
    value : float
    grad : ndarray
        Derivative with respect to ``Iw``.
    """
    Iw = check_volume(Iw, "warped image")
    I1 = check_volume(I1, "fixed image")
    check_same_shape(Iw, I1, ("warped", "fixed"))
    scheme = scheme or SearchScheme(ndim=Iw.ndim)
    Dw, cache = mind_forward(Iw, scheme)
    D1 = fixed_descriptor if fixed_descriptor is not None else mind_forward(I1, scheme)[0]
    diff = Dw - D1
    value = float(np.mean(diff * diff))
    grad = mind_backward(cache, 2.0 * diff / diff.size)
    return value, grad


def descriptor_cosine_dissim(D0, D1):
    """``1 - mean_x <D0(x), D1(x)>`` for unit-norm tokens; lies in [0, 2].

    Returns ``(value, grad_D0)``.
    """
    D0 = np.asarray(D0, dtype=np.float64)
    D1 = np.asarray(D1, dtype=np.float64)
    check_same_shape(D0, D1, ("D0", "D1"))
    nvox = D0[0].size
    value = 1.0 - float(np.sum(D0 * D1)) / nvox
    return value, -D1 / nvox


@dataclass(frozen=True)
class LmiSpec:
    """Parzen joint-histogram settings for local mutual information."""

    bins: int = 16
    patch_side: int = 21
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.patch_side < 2:
            raise ValueError("patch_side must be >= 2")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def centers(self):
        return (np.arange(self.bins) + 0.5) / self.bins

    @property
    def sigma(self):
        return self.bandwidth / self.bins


def patch_slices(shape, side):
    """Non-overlapping tiling of a grid into cubes of ``side`` voxels.

    Remainders at the far boundary form smaller patches.
    """
    starts = [range(0, n, side) for n in shape]
    for corner in np.ndindex(*[len(s) for s in starts]):
        yield tuple(slice(starts[a][c], min(starts[a][c] + side, shape[a]))
                    for a, c in enumerate(corner))


def parzen_weights(values, spec):
    """Per-sample Gaussian bin memberships normalized to sum to one.

    Returns ``(w, raw, total)`` with ``w`` of shape ``(n, bins)``.
    """
    diff = values[:, None] - spec.centers[None, :]
    raw = np.exp(-0.5 * (diff / spec.sigma) ** 2)
    total = raw.sum(axis=1, keepdims=True)
    return raw / total, raw, total


def _parzen_weights_grad(values, spec, raw, total, gw):
    """Back-propagate ``gw`` (d/dw) through :func:`parzen_weights` to values."""
    w = raw / total
    graw = (gw - np.sum(gw * w, axis=1, keepdims=True)) / total
    diff = values[:, None] - spec.centers[None, :]
    return np.sum(graw * raw * (-diff / spec.sigma ** 2), axis=1)


def _mi_from_joint(P):
    p = P.sum(axis=1)
    q = P.sum(axis=0)
    outer = p[:, None] * q[None, :]
    mask = P > 0
    ratio = np.ones_like(P)
    ratio[mask] = P[mask] / outer[mask]
    return float(np.sum(P[mask] * np.log(ratio[mask]))), np.log(ratio), mask


def patch_mi(a, b, spec, need_grad=True):
    """Parzen mutual information of two equally sized samples (nats)."""
    wa, raw_a, tot_a = parzen_weights(a, spec)
    wb, _, _ = parzen_weights(b, spec)
    n = a.size
    P = wa.T @ wb / n
    mi, logratio, mask = _mi_from_joint(P)
    if not need_grad:
        return mi, None
    gP = np.where(mask, logratio - 1.0, 0.0)
    gwa = wb @ gP.T / n
    return mi, _parzen_weights_grad(a, spec, raw_a, tot_a, gwa)


def local_mi(I0, I1, spec=None):
    """Mean over non-overlapping patches of Parzen mutual information.

    Intensities are expected in [0, 1]. The loss used for registration is
    the negative of this value.

    Returns
    -------
    value : float
    grad : ndarray
        Derivative of the mean MI with respect to ``I0``.
    """
    I0 = check_volume(I0, "I0")
    I1 = check_volume(I1, "I1")
    check_same_shape(I0, I1, ("I0", "I1"))
    spec = spec or LmiSpec()
    grad = np.zeros_like(I0)
    patches = list(patch_slices(I0.shape, spec.patch_side))
    total = 0.0
    for sl in patches:
        mi, g = patch_mi(I0[sl].ravel(), I1[sl].ravel(), spec)
        total += mi
        grad[sl] = g.reshape(I0[sl].shape)
    k = len(patches)
    return total / k, grad / k


def lmi_loss(Iw, I1, spec=None):
    """Negative local mutual information and its gradient."""
    value, grad = local_mi(Iw, I1, spec)
    return -value, -grad
