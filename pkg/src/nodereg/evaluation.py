"""Registration quality measures and the signed-rank comparison test."""

import math

import numpy as np

from ._validation import check_field, check_same_shape
from .grid import jacobian_det

SIGNIFICANCE_LEVEL = 0.005


def dice(A, B, labels=None):
    """Per-label Dice overlap and their mean.

    Parameters
    ----------
    A, B : ndarray of int
        Label volumes of equal shape.
    labels : iterable of int, optional
        Labels to score. Defaults to every non-zero label present in either
        volume.

    Returns
    -------
    per_label : dict
        ``label -> dice``; labels absent from both volumes map to ``nan``.
    mean : float
        Mean over labels present in at least one volume (``nan`` if none).
    """
    A = np.asarray(A)
    B = np.asarray(B)
    check_same_shape(A, B, ("A", "B"))
    if labels is None:
        labels = np.union1d(np.unique(A), np.unique(B))
        labels = labels[labels != 0]
    per_label = {}
    for lab in labels:
        a = A == lab
        b = B == lab
        denom = int(a.sum()) + int(b.sum())
        per_label[int(lab)] = 2.0 * float(np.sum(a & b)) / denom if denom else float("nan")
    scored = [v for v in per_label.values() if not math.isnan(v)]
    return per_label, float(np.mean(scored)) if scored else float("nan")


def neg_jac_ratio(phi):
    """Percentage of voxels with ``det Jac phi <= 0`` over the whole grid."""
    det = jacobian_det(phi)
    return 100.0 * float(np.count_nonzero(det <= 0)) / det.size


def interior_mask(shape, margin=1):
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(margin, n - margin) for n in shape)] = True
    return mask


def endpoint_error(phi, phi_true, margin=1):
    """Mean and max of ``||phi(x) - phi_true(x)||`` over interior voxels."""
    phi = check_field(phi, "phi")
    phi_true = check_field(phi_true, "phi_true")
    check_same_shape(phi, phi_true, ("phi", "phi_true"))
    err = np.sqrt(np.sum((phi - phi_true) ** 2, axis=0))[interior_mask(phi.shape[1:], margin)]
    return float(err.mean()), float(err.max())


def _signed_ranks(x, y):
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    diff = diff[diff != 0]
    if diff.size == 0:
        return diff, diff
    absd = np.abs(diff)
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(diff.size)
    sorted_abs = absd[order]
    i = 0
    while i < diff.size:
        j = i
        while j + 1 < diff.size and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return diff, ranks


def _tail(t_plus, null, alternative, tol=1e-9):
    upper = float(np.mean(null >= t_plus - tol))
    lower = float(np.mean(null <= t_plus + tol))
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2.0 * min(upper, lower))


def wilcoxon_signed_rank(x, y, alternative="greater", mode="auto"):
    """Wilcoxon signed-rank test of paired samples.

    Zero differences are dropped and tied magnitudes get midranks. The
    ``exact`` mode enumerates all sign patterns of the ranks; ``approx``
    uses the normal approximation with tie and continuity corrections.
    ``auto`` is exact for at most 12 non-zero differences.

    Parameters
    ----------
    x, y : array-like
        Paired samples of equal length (at least 5).
    alternative : {"greater", "less", "two-sided"}
        ``greater`` tests whether ``x`` tends to exceed ``y``.
    mode : {"auto", "exact", "approx"}

    Returns
    -------
    float
        p-value in (0, 1]; 1.0 when every difference is zero.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if x.size < 5:
        raise ValueError("the signed-rank test needs at least 5 pairs")
    if alternative not in ("greater", "less", "two-sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    diff, ranks = _signed_ranks(x, y)
    n = diff.size
    if n == 0:
        return 1.0
    t_plus = float(ranks[diff > 0].sum())
    if mode == "auto":
        mode = "exact" if n <= 12 else "approx"
    if mode == "exact":
        if n > 20:
            raise ValueError("exact enumeration is limited to 20 non-zero differences")
        signs = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
        return _tail(t_plus, signs @ ranks, alternative)
    if mode != "approx":
        raise ValueError(f"unknown mode {mode!r}")
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    sd = math.sqrt(var)

    def sf(z):
        return 0.5 * math.erfc(z / math.sqrt(2.0))

    if alternative == "greater":
        return sf((t_plus - mean - 0.5) / sd)
    if alternative == "less":
        return sf((mean - t_plus - 0.5) / sd)
    z = (abs(t_plus - mean) - 0.5) / sd
    return min(1.0, 2.0 * sf(z))


def is_significant(pvalues, level=SIGNIFICANCE_LEVEL):
    """True when the largest p-value over experiment families is below ``level``."""
    return max(pvalues) < level
