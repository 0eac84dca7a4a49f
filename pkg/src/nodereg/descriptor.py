"""Self-similarity descriptors: MIND and tokens over learned feature maps.

Every channel of a token compares the patch around ``x`` with the patch
around ``x + r`` for one search offset ``r``::

    D(I, x, r) = exp(-d_P(I, x, x + r) / Var(I, x))

Reads outside the grid are clamped to the border. The ``*_forward``
functions return a cache consumed by the matching ``*_backward``.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_volume

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class SearchScheme:
    """Search offsets ``{+-d_r e_i, +-2 d_r e_i}`` and patch radius ``r``."""

    radius: int = 1
    dilation: int = 2
    ndim: int = 3

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        if self.dilation < 1:
            raise ValueError("dilation must be a positive integer")
        if self.ndim not in (1, 2, 3):
            raise ValueError("ndim must be 1, 2 or 3")

    @property
    def offsets(self):
        return search_offsets(self.ndim, self.dilation)


def search_offsets(ndim, dilation):
    """Two scaled axis-aligned neighbourhoods: 12 offsets in 3-D, 8 in 2-D."""
    out = []
    for scale in (dilation, 2 * dilation):
        for axis in range(ndim):
            for sign in (1, -1):
                o = [0] * ndim
                o[axis] = sign * scale
                out.append(tuple(o))
    return np.array(out, dtype=np.intp)


def unit_offsets(ndim):
    """The ``2 d`` axis-aligned unit offsets used for the local variance."""
    return search_offsets(ndim, 1)[: 2 * ndim]


def _clamped(I, pos):
    idx = tuple(min(max(int(p), 0), n - 1) for p, n in zip(pos, I.shape))
    return I[idx]


def patch_ssd(I, x1, x2, r):
    """Sum of squared differences between the patches at ``x1`` and ``x2``.

    A direct loop over the ``(2r+1)^d`` patch positions with clamped reads.
    """
    I = np.asarray(I, dtype=np.float64)
    x1, x2 = np.asarray(x1, int), np.asarray(x2, int)
    total = 0.0
    for p in np.ndindex(*([2 * r + 1] * I.ndim)):
        p = np.asarray(p) - r
        diff = _clamped(I, x1 + p) - _clamped(I, x2 + p)
        total += diff * diff
    return total


def _region(start, shape):
    return tuple(slice(s, s + n) for s, n in zip(start, shape))


def _patch_ssd_forward(I, offsets, r):
    """Patch SSD maps for all ``offsets``, shape ``(len(offsets), *I.shape)``."""
    d = I.ndim
    pad = r + int(np.max(np.abs(offsets))) if len(offsets) else r
    E = np.pad(I, pad, mode="edge")
    ext = tuple(n + 2 * r for n in I.shape)
    base = np.full(d, pad - r)
    out = np.zeros((len(offsets),) + I.shape)
    diffs = []
    for k, o in enumerate(offsets):
        diff = E[_region(base, ext)] - E[_region(base + o, ext)]
        diffs.append(diff)
        sq = diff * diff
        for p in np.ndindex(*([2 * r + 1] * d)):
            out[k] += sq[_region(p, I.shape)]
    cache = (I.shape, np.asarray(offsets), r, pad, diffs)
    return out, cache


def _pad_edge_adjoint(G, pad, shape):
    """Fold gradients on an edge-padded array back onto the original grid."""
    G = G.copy()
    for axis, n in enumerate(shape):
        G = np.moveaxis(G, axis, 0)
        G[pad] += G[:pad].sum(axis=0)
        G[pad + n - 1] += G[pad + n:].sum(axis=0)
        G = np.moveaxis(G[pad:pad + n], 0, axis)
    return G


def _patch_ssd_backward(cache, g):
    shape, offsets, r, pad, diffs = cache
    d = len(shape)
    ext = tuple(n + 2 * r for n in shape)
    base = np.full(d, pad - r)
    GE = np.zeros(tuple(n + 2 * pad for n in shape))
    for k, o in enumerate(offsets):
        gsq = np.zeros(ext)
        for p in np.ndindex(*([2 * r + 1] * d)):
            gsq[_region(p, shape)] += g[k]
        gdiff = 2.0 * diffs[k] * gsq
        GE[_region(base, ext)] += gdiff
        GE[_region(base + o, ext)] -= gdiff
    return _pad_edge_adjoint(GE, pad, shape)


def variance_floor(I):
    """Lower clamp for the local variance: ``1e-6 * range(I)^2``."""
    rng = float(np.max(I) - np.min(I)) if np.size(I) else 0.0
    return max(VARIANCE_FLOOR * rng * rng, np.finfo(np.float64).tiny)


def _local_variance_forward(I, r):
    offsets = unit_offsets(I.ndim)
    maps, cache = _patch_ssd_forward(I, offsets, r)
    raw = maps.mean(axis=0)
    floor = variance_floor(I)
    # the floor depends on I through its range, via the extreme voxels
    extremes = (np.argmax(I), np.argmin(I), float(np.max(I) - np.min(I)))
    return np.maximum(raw, floor), (cache, raw > floor, len(offsets), extremes, I.shape)


def _local_variance_backward(cache, g):
    ssd_cache, active, n, (imax, imin, rng), shape = cache
    gm = np.broadcast_to(g * active / n, (n,) + g.shape)
    gI = _patch_ssd_backward(ssd_cache, gm)
    g_floor = float(np.sum(g[~active]))
    if g_floor and VARIANCE_FLOOR * rng * rng > np.finfo(np.float64).tiny:
        gI[np.unravel_index(imax, shape)] += 2.0 * VARIANCE_FLOOR * rng * g_floor
        gI[np.unravel_index(imin, shape)] -= 2.0 * VARIANCE_FLOOR * rng * g_floor
    return gI


def local_variance(I, radius=1, clamp=True):
    """Mean patch SSD to the ``2d`` axis neighbours, clamped below.

    Parameters
    ----------
    I : ndarray
        Scalar volume.
    radius : int
        Patch radius ``r``.
    clamp : bool
        Apply the floor :func:`variance_floor`; ``False`` returns the raw mean.
    """
    I = check_volume(I, "image")
    maps, _ = _patch_ssd_forward(I, unit_offsets(I.ndim), radius)
    raw = maps.mean(axis=0)
    return np.maximum(raw, variance_floor(I)) if clamp else raw


def mind_forward(I, scheme):
    """MIND descriptor and backward cache.

    Channels are ``exp(-d_P / Var)`` divided by their per-voxel maximum,
    evaluated as ``exp(-(d_P - min d_P) / Var)``.
    """
    I = check_volume(I, "image")
    if I.ndim != scheme.ndim:
        scheme = SearchScheme(scheme.radius, scheme.dilation, I.ndim)
    a, ssd_cache = _patch_ssd_forward(I, scheme.offsets, scheme.radius)
    var, var_cache = _local_variance_forward(I, scheme.radius)
    jmin = np.argmin(a, axis=0)
    amin = np.take_along_axis(a, jmin[None], axis=0)[0]
    z = (a - amin) / var
    D = np.exp(-z)
    return D, (ssd_cache, var_cache, jmin, z, var, D)


def mind_backward(cache, gD):
    """Gradient of ``sum(gD * mind(I))`` with respect to ``I``."""
    ssd_cache, var_cache, jmin, z, var, D = cache
    gz = -D * gD
    ga = gz / var
    gmin = -ga.sum(axis=0)
    np.put_along_axis(ga, jmin[None],
                      np.take_along_axis(ga, jmin[None], axis=0) + gmin[None], axis=0)
    gvar = -np.sum(gz * z, axis=0) / var
    return _patch_ssd_backward(ssd_cache, ga) + _local_variance_backward(var_cache, gvar)


def mind(I, scheme=None):
    """MIND descriptor field, shape ``(|R|, *I.shape)`` with values in (0, 1]."""
    I = check_volume(I, "image")
    scheme = scheme or SearchScheme(ndim=I.ndim)
    return mind_forward(I, scheme)[0]


def tokens_forward(F, dilations=(1, 2), radius=1):
    """Stacked, L2-normalized self-similarity tokens of a feature map.

    A common factor over all channels cancels in the normalization, so the
    exponent is shifted by its per-voxel minimum for numerical range.
    """
    F = check_volume(F, "feature map")
    offsets = np.concatenate([search_offsets(F.ndim, dr) for dr in dilations])
    a, ssd_cache = _patch_ssd_forward(F, offsets, radius)
    var, var_cache = _local_variance_forward(F, radius)
    q = a / var
    jmin = np.argmin(q, axis=0)
    qmin = np.take_along_axis(q, jmin[None], axis=0)[0]
    t = np.exp(-(q - qmin))
    norm = np.sqrt(np.sum(t * t, axis=0))
    bad = ~(norm > 0) | ~np.isfinite(norm)
    u = t / np.where(bad, 1.0, norm)
    if np.any(bad):
        u[:, bad] = 1.0 / np.sqrt(len(offsets))
    return u, (ssd_cache, var_cache, jmin, q, var, t, norm, u, bad)


def tokens_backward(cache, gu):
    """Gradient of ``sum(gu * tokens(F))`` with respect to ``F``."""
    ssd_cache, var_cache, jmin, q, var, t, norm, u, bad = cache
    safe = np.where(bad, 1.0, norm)
    gt = (gu - u * np.sum(u * gu, axis=0)) / safe
    gt[:, bad] = 0.0
    gq = -t * gt
    gmin = -gq.sum(axis=0)
    np.put_along_axis(gq, jmin[None],
                      np.take_along_axis(gq, jmin[None], axis=0) + gmin[None], axis=0)
    ga = gq / var
    gvar = -np.sum(gq * q, axis=0) / var
    return _patch_ssd_backward(ssd_cache, ga) + _local_variance_backward(var_cache, gvar)


def token_from_features(F, dilations=(1, 2), radius=1):
    """Unit-norm tokens, ``|R| * len(dilations)`` channels (24 in 3-D, 16 in 2-D)."""
    return tokens_forward(F, dilations, radius)[0]


class MINDDescriptor(TransformerMixin, BaseEstimator):
    """Dense MIND features as a stateless transformer.

    Parameters
    ----------
    radius : int, default=1
        Patch radius.
    dilation : int, default=2
        Scale of the search offsets.
    """

    def __init__(self, radius=1, dilation=2):
        self.radius = radius
        self.dilation = dilation

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_volume(X, "image")
        return mind(X, SearchScheme(self.radius, self.dilation, X.ndim))
