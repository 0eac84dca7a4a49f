"""Learned self-similarity descriptors trained with a voxel-level InfoNCE loss.

A UNet maps an image to a single-channel feature map; tokens are the
stacked, normalized self-similarities of that map at two dilations.
Training pairs an image with a random monotone (Bezier) intensity remap of
itself, optionally applied to the inverted image, so that the network
learns features that survive contrast changes.
"""

from dataclasses import dataclass
from math import comb

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_random_state, check_volume
from .descriptor import tokens_backward, tokens_forward
from .neural import DescriptorUNet, adam_step


@dataclass(frozen=True)
class BezierCurve:
    """Monotone intensity map with sorted control points in [0, 1]."""

    points: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a Bezier curve needs at least two control points")
        if np.any(np.diff(pts) < 0):
            raise ValueError("control points must be non-decreasing")
        if pts[0] < 0 or pts[-1] > 1:
            raise ValueError("control points must lie in [0, 1]")
        object.__setattr__(self, "points", tuple(float(p) for p in pts))

    @property
    def degree(self):
        return len(self.points) - 1

    @classmethod
    def identity(cls, degree=3):
        return cls(tuple(np.arange(degree + 1) / degree))


@dataclass(frozen=True)
class ContrastiveConfig:
    """Descriptor training settings.

    ``N_k`` is capped at the voxel count of the training images.
    """

    tau: float = 0.05
    N_k: int = 8196
    p: float = 0.5
    n: int = 3
    descriptor_lr: float = 1e-4
    batch: int = 1
    iterations: int = 2000

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.n < 1 or self.N_k < 2:
            raise ValueError("need n >= 1 and N_k >= 2")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")


def bezier_eval(curve, t):
    """``B(t) = sum_i P_i * C(n, i) t^i (1 - t)^(n - i)`` for ``t`` in [0, 1]."""
    pts = curve.points if isinstance(curve, BezierCurve) else tuple(curve)
    t = np.asarray(t, dtype=np.float64)
    n = len(pts) - 1
    out = np.zeros_like(t)
    for i, p in enumerate(pts):
        out = out + p * comb(n, i) * t ** i * (1.0 - t) ** (n - i)
    return out


def random_curve(rng, degree=3):
    return BezierCurve(tuple(np.sort(rng.uniform(0.0, 1.0, degree + 1))))


def augment_modality(image, p=0.5, n=3, seed=None, return_params=False):
    """Random monotone remap of ``image`` (optionally of ``1 - image``).

    Parameters
    ----------
    image : ndarray
        Intensities in [0, 1].
    p : float
        Probability of remapping the inverted image.
    n : int
        Bezier degree (``n + 1`` control points).
    seed : int or Generator
    return_params : bool
        Also return ``(curve, inverted)``.
    """
    image = check_volume(image, "image")
    rng = check_random_state(seed)
    curve = random_curve(rng, n)
    inverted = bool(rng.random() < p)
    base = 1.0 - image if inverted else image
    out = np.clip(bezier_eval(curve, np.clip(base, 0.0, 1.0)), 0.0, 1.0)
    return (out, curve, inverted) if return_params else out


def infonce_loss(tokens_a, tokens_b, positions, tau):
    """Voxel-level InfoNCE with same-position positives.

    Parameters
    ----------
    tokens_a, tokens_b : ndarray, shape (C, *spatial)
        Unit-norm token fields of the two views.
    positions : ndarray of int
        Distinct flat voxel indices of the ``N_k`` anchors.
    tau : float
        Temperature.

    Returns
    -------
    loss : float
        ``-mean_i log softmax_j(<a_i, b_j> / tau)[i]``.
    grad_a, grad_b : ndarray
        Gradients with respect to the full token fields.
    """
    C = tokens_a.shape[0]
    A = tokens_a.reshape(C, -1)[:, positions].T
    B = tokens_b.reshape(C, -1)[:, positions].T
    k = len(positions)
    G = A @ B.T
    G *= 1.0 / tau
    shift = G.max(axis=1, keepdims=True)
    positive = np.diag(G) - shift[:, 0]
    G -= shift
    np.exp(G, out=G)
    denom = G.sum(axis=1, keepdims=True)
    loss = -float(np.mean(positive - np.log(denom[:, 0])))
    # softmax minus the one-hot positive, scaled by 1/k
    G /= denom
    G[np.diag_indices(k)] -= 1.0
    G *= 1.0 / k
    gA = G @ B / tau
    gB = G.T @ A / tau
    grad_a = np.zeros((C, tokens_a[0].size))
    grad_b = np.zeros((C, tokens_b[0].size))
    grad_a[:, positions] = gA.T
    grad_b[:, positions] = gB.T
    return loss, grad_a.reshape(tokens_a.shape), grad_b.reshape(tokens_b.shape)


class ContrastiveDescriptor(TransformerMixin, BaseEstimator):
    """Trainable dense descriptor; ``transform`` returns unit-norm tokens.

    Parameters
    ----------
    tau : float
        InfoNCE temperature.
    N_k : int
        Anchors sampled per iteration.
    p : float
        Probability of the inverted-intensity branch of the augmentation.
    n : int
        Bezier degree.
    descriptor_lr : float
        Adam learning rate.
    iterations : int
    widths : tuple of int
        Encoder channel widths.
    dilations : tuple of int
        Token dilations stacked per voxel.
    seed : int
    """

    def __init__(self, tau=0.05, N_k=8196, p=0.5, n=3, descriptor_lr=1e-4,
                 iterations=2000, widths=(16, 32, 64), dilations=(1, 2), seed=0):
        self.tau = tau
        self.N_k = N_k
        self.p = p
        self.n = n
        self.descriptor_lr = descriptor_lr
        self.iterations = iterations
        self.widths = widths
        self.dilations = dilations
        self.seed = seed

    def fit(self, X, y=None):
        """Train on a list of images of equal dimensionality.

        Raises
        ------
        FloatingPointError
            If the loss becomes non-finite; the message gives the iteration.
        """
        corpus = [check_volume(img, "corpus image", min_size=2) for img in X]
        if not corpus:
            raise ValueError("the training corpus is empty")
        ndim = corpus[0].ndim
        cfg = ContrastiveConfig(self.tau, self.N_k, self.p, self.n, self.descriptor_lr,
                                iterations=self.iterations)
        rng = check_random_state(self.seed)
        net_a = DescriptorUNet(ndim, self.widths)
        net_b = DescriptorUNet(ndim, self.widths)
        params = net_a.init_params(rng)
        losses = []
        for it in range(cfg.iterations):
            image = corpus[rng.integers(len(corpus))]
            other = augment_modality(image, cfg.p, cfg.n, rng)
            ta, ca = tokens_forward(net_a.forward(params, image), self.dilations)
            tb, cb = tokens_forward(net_b.forward(params, other), self.dilations)
            k = min(cfg.N_k, image.size)
            positions = rng.choice(image.size, size=k, replace=False)
            loss, ga, gb = infonce_loss(ta, tb, positions, cfg.tau)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite contrastive loss at iteration {it}")
            grads, _ = net_a.backward(params, tokens_backward(ca, ga))
            grads, _ = net_b.backward(params, tokens_backward(cb, gb), grads)
            adam_step(params, grads, cfg.descriptor_lr)
            losses.append(loss)
        self.network_ = net_a
        self.params_ = params
        self.loss_curve_ = losses
        return self

    def features(self, X):
        check_is_fitted(self, "params_")
        return self.network_.forward(self.params_, X)

    def transform(self, X):
        return tokens_forward(self.features(X), self.dilations)[0]


def descriptor_from_params(params):
    """Rebuild the :class:`DescriptorUNet` that owns a parameter store."""
    w_in = params["in0.w"]
    widths = (w_in.shape[0], params["enc2.w"].shape[0], params["enc3.w"].shape[0])
    return DescriptorUNet(w_in.ndim - 2, widths)


def train_descriptor(corpus, cfg=None, seed=0, widths=(16, 32, 64)):
    """Train a descriptor network and return its frozen parameters."""
    cfg = cfg or ContrastiveConfig()
    est = ContrastiveDescriptor(cfg.tau, cfg.N_k, cfg.p, cfg.n, cfg.descriptor_lr,
                                cfg.iterations, widths, seed=seed)
    return est.fit(corpus).params_
