"""Registration energy, its gradient, and the per-pair optimization loop.

The energy of a map ``phi = Exp(v_theta)`` is::

    S(moving o phi, fixed) + lambda_J * L_J + lambda_grad * L_grad + lambda_mag * L_mag

with ``L_J = mean max(0, eps - det Jac phi)``, ``L_grad = mean ||grad(phi - id)||_F^2``
and ``L_mag = ||K v||^2``. All voxel integrals are voxel means.
"""

import time
from dataclasses import dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_same_shape, check_volume
from .descriptor import SearchScheme, mind_forward, tokens_backward, tokens_forward
from .evaluation import dice, neg_jac_ratio
from .flow import FlowConfig, flow_vjp, integrate_flow, integrate_inverse, warp
from .grid import (central_diff, central_diff_adjoint, identity_grid, jacobian_det,
                   jacobian_det_vjp, sample_linear_vjp, sample_nearest)
from .neural import NetParams, VelocityNet, adam_step
from .similarity import LmiSpec, descriptor_cosine_dissim, lmi_loss, mind_mse
from .spectral import KernelSpec, v_norm_sq, v_norm_sq_grad

METRICS = ("mind", "contrastive", "lmi")
TRACE_COLUMNS = ("epoch", "S", "L_J", "L_grad", "L_mag", "total")


class NumericalError(RuntimeError):
    """Raised when an optimization produces a non-finite loss term."""


@dataclass(frozen=True)
class LossConfig:
    """Weights of the registration energy and optimizer settings."""

    lambda_J: float = 2.5
    lambda_grad: float = 5e-2
    lambda_mag: float = 5e-5
    epsilon: float = 0.1
    metric: str = "mind"
    epochs: int = 300
    lr: float = 5e-3

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        for name in ("lambda_J", "lambda_grad", "lambda_mag"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# regularizers


def loss_jacobian_penalty(phi, epsilon):
    """``mean_x max(0, epsilon - det Jac phi(x))`` and its gradient."""
    det = jacobian_det(phi)
    active = (epsilon - det) > 0
    value = float(np.mean(np.where(active, epsilon - det, 0.0)))
    grad = jacobian_det_vjp(phi, -active.astype(np.float64) / det.size)
    return value, grad


def loss_gradient_smoothness(phi):
    """``mean_x ||grad u(x)||_F^2`` of the displacement ``u = phi - id``."""
    phi = np.asarray(phi, dtype=np.float64)
    u = phi - identity_grid(phi.shape[1:])
    d = u.shape[0]
    n = u[0].size
    value = 0.0
    grad = np.zeros_like(u)
    for i in range(d):
        for j in range(d):
            du = central_diff(u[i], j)
            value += float(np.sum(du * du))
            grad[i] += central_diff_adjoint(2.0 * du / n, j)
    return value / n, grad


def loss_magnitude(v, kernel, multiplier=None):
    """``||K v||^2`` (a stationary field integrated over unit time)."""
    return v_norm_sq(v, kernel, multiplier), v_norm_sq_grad(v, kernel, multiplier)


# ---------------------------------------------------------------------------
# objective


class RegistrationObjective:
    """Loss and parameter gradient for one fixed/moving pair.

    Parameters
    ----------
    fixed, moving : ndarray
        Images of equal shape with intensities in [0, 1].
    loss : LossConfig
    flow : FlowConfig
    kernel : KernelSpec
    width : int
        Hidden width of the velocity network.
    scheme : SearchScheme, optional
        MIND search scheme (``mind`` metric).
    lmi : LmiSpec, optional
        Histogram settings (``lmi`` metric).
    descriptor : (DescriptorUNet, NetParams), optional
        Frozen feature network (``contrastive`` metric).
    """

    def __init__(self, fixed, moving, loss, flow, kernel, width=32, scheme=None,
                 lmi=None, descriptor=None, dilations=(1, 2)):
        self.fixed = check_volume(fixed, "fixed", min_size=2)
        self.moving = check_volume(moving, "moving", min_size=2)
        check_same_shape(self.fixed, self.moving, ("fixed", "moving"))
        if tuple(kernel.shape) != self.fixed.shape:
            raise ValueError(f"kernel shape {kernel.shape} does not match images "
                             f"{self.fixed.shape}")
        self.loss, self.flow, self.kernel = loss, flow, kernel
        self.net = VelocityNet(kernel, width)
        self.scheme = scheme or SearchScheme(ndim=self.fixed.ndim)
        self.lmi = lmi or LmiSpec()
        self.dilations = tuple(dilations)
        self.descriptor = descriptor
        self.metric_scale = 1.0
        if loss.metric == "mind":
            self._fixed_desc = mind_forward(self.fixed, self.scheme)[0]
        elif loss.metric == "contrastive":
            if descriptor is None:
                raise ValueError("the contrastive metric needs a trained descriptor network")
            unet, dparams = descriptor
            self._fixed_desc = tokens_forward(unet.forward(dparams, self.fixed),
                                              self.dilations)[0]

    def similarity(self, warped, need_grad=True):
        """Dissimilarity of a warped image to the fixed image, with gradient."""
        metric = self.loss.metric
        if metric == "mind":
            s, g = mind_mse(warped, self.fixed, self.scheme, self._fixed_desc)
        elif metric == "lmi":
            s, g = lmi_loss(warped, self.fixed, self.lmi)
        else:
            unet, dparams = self.descriptor
            feats = unet.forward(dparams, warped)
            tok, cache = tokens_forward(feats, self.dilations)
            s, gtok = descriptor_cosine_dissim(tok, self._fixed_desc)
            g = None
            if need_grad:
                _, g = unet.backward(dparams, tokens_backward(cache, gtok), need_params=False)
        return self.metric_scale * s, (self.metric_scale * g if g is not None else None)

    def evaluate(self, params, need_grad=True):
        """Loss terms (dict) and, if requested, parameter gradients (dict)."""
        lc = self.loss
        v = self.net.forward(params)
        phi, states = integrate_flow(v, self.flow, return_states=True)
        warped = warp(self.moving, phi)
        s, g_warped = self.similarity(warped, need_grad)
        l_j, g_j = loss_jacobian_penalty(phi, lc.epsilon)
        l_g, g_g = loss_gradient_smoothness(phi)
        l_m, g_m = loss_magnitude(v, self.kernel, self.net.multiplier)
        total = s + lc.lambda_J * l_j + lc.lambda_grad * l_g + lc.lambda_mag * l_m
        terms = {"S": s, "L_J": l_j, "L_grad": l_g, "L_mag": l_m, "total": total}
        if not need_grad:
            return terms, None
        _, g_phi = sample_linear_vjp(self.moving, phi, g_warped, need_field=False)
        g_phi = g_phi + lc.lambda_J * g_j + lc.lambda_grad * g_g
        gv = flow_vjp(v, self.flow, g_phi, states) + lc.lambda_mag * g_m
        return terms, self.net.backward(params, gv)


def total_loss(params, pair, loss, flow, kernel, **kwargs):
    """Scalar registration energy for ``pair = (fixed, moving)``."""
    fixed, moving = pair
    obj = RegistrationObjective(fixed, moving, loss, flow, kernel, **kwargs)
    return obj.evaluate(params, need_grad=False)[0]["total"]


def loss_gradient_wrt_params(params, pair, loss, flow, kernel, **kwargs):
    """Gradient dict of :func:`total_loss` with respect to the velocity network."""
    fixed, moving = pair
    obj = RegistrationObjective(fixed, moving, loss, flow, kernel, **kwargs)
    return obj.evaluate(params, need_grad=True)[1]


# ---------------------------------------------------------------------------
# results and estimator


@dataclass
class RegistrationResult:
    phi: np.ndarray
    phi_inv: np.ndarray
    warped: np.ndarray
    velocity: np.ndarray
    params: NetParams
    trace: list = field(default_factory=list)
    report: dict = field(default_factory=dict)


def _first_nonfinite(terms):
    for key in ("S", "L_J", "L_grad", "L_mag", "total"):
        if not np.isfinite(terms[key]):
            return key
    return None


class NeuralODERegistration(BaseEstimator):
    """Instance-specific diffeomorphic registration with a velocity network.

    ``fit(moving, fixed)`` trains a fresh network so that
    ``moving o phi`` matches ``fixed``; ``transform`` then warps any image
    defined on the moving grid onto the fixed grid.

    Parameters
    ----------
    metric : {"mind", "contrastive", "lmi"}
    lambda_J, lambda_grad, lambda_mag : float
        Regularization weights.
    epsilon : float
        Jacobian penalty threshold in (0, 1).
    epochs : int
    lr : float
        Adam learning rate.
    h : float
        Euler step.
    t0, t1 : float
        Integration interval, ``[0, 1]`` by default.
    gamma, alpha, s : float, float, int
        Smoothing operator ``(gamma - alpha Laplacian)^s``.
    spacing : tuple of float, optional
        Voxel spacing used by the smoothing operator.
    width : int
        Hidden channels of the velocity network.
    radius, dilation : int
        MIND search scheme.
    bins, patch_side, bandwidth :
        Local mutual information settings.
    descriptor : ContrastiveDescriptor or (DescriptorUNet, NetParams), optional
        Frozen descriptor network for the contrastive metric.
    checkpoint_every : int
        Flow checkpoint interval (0 keeps every state).
    seed : int
        Network initialization seed.
    """

    def __init__(self, metric="mind", lambda_J=2.5, lambda_grad=5e-2, lambda_mag=5e-5,
                 epsilon=0.1, epochs=150, lr=5e-3, h=0.05, t0=0.0, t1=1.0, gamma=1.0,
                 alpha=5e-4, s=1, spacing=None, width=32, radius=1, dilation=2, bins=16,
                 patch_side=16, bandwidth=1.0, descriptor=None, checkpoint_every=0, seed=0):
        self.metric = metric
        self.lambda_J = lambda_J
        self.lambda_grad = lambda_grad
        self.lambda_mag = lambda_mag
        self.epsilon = epsilon
        self.epochs = epochs
        self.lr = lr
        self.h = h
        self.t0 = t0
        self.t1 = t1
        self.gamma = gamma
        self.alpha = alpha
        self.s = s
        self.spacing = spacing
        self.width = width
        self.radius = radius
        self.dilation = dilation
        self.bins = bins
        self.patch_side = patch_side
        self.bandwidth = bandwidth
        self.descriptor = descriptor
        self.checkpoint_every = checkpoint_every
        self.seed = seed

    def _configs(self, shape):
        loss = LossConfig(self.lambda_J, self.lambda_grad, self.lambda_mag, self.epsilon,
                          self.metric, self.epochs, self.lr)
        flow = FlowConfig(self.h, self.t0, self.t1, self.checkpoint_every)
        kernel = KernelSpec(shape, self.gamma, self.alpha, self.s, self.spacing)
        return loss, flow, kernel

    def _descriptor_pair(self, ndim):
        desc = self.descriptor
        if desc is None:
            return None
        if hasattr(desc, "params_"):
            return desc.network_, desc.params_
        return desc

    def build_objective(self, moving, fixed):
        moving = check_volume(moving, "moving", min_size=2)
        fixed = check_volume(fixed, "fixed", min_size=2)
        loss, flow, kernel = self._configs(fixed.shape)
        return RegistrationObjective(
            fixed, moving, loss, flow, kernel, width=self.width,
            scheme=SearchScheme(self.radius, self.dilation, fixed.ndim),
            lmi=LmiSpec(self.bins, self.patch_side, self.bandwidth),
            descriptor=self._descriptor_pair(fixed.ndim))

    def fit(self, moving, fixed, labels_moving=None, labels_fixed=None):
        """Optimize the velocity network for one pair.

        Raises
        ------
        NumericalError
            If a loss term becomes non-finite; the message names the term.
        """
        start = time.perf_counter()
        obj = self.build_objective(moving, fixed)
        params = obj.net.init_params(self.seed)
        trace = []
        for epoch in range(self.epochs):
            terms, grads = obj.evaluate(params)
            bad = _first_nonfinite(terms)
            if bad is not None:
                raise NumericalError(f"non-finite {bad} at epoch {epoch}")
            trace.append({"epoch": epoch, **terms})
            adam_step(params, grads, self.lr)
        terms, _ = obj.evaluate(params, need_grad=False)
        bad = _first_nonfinite(terms)
        if bad is not None:
            raise NumericalError(f"non-finite {bad} after the final update")
        trace.append({"epoch": self.epochs, **terms})

        v = obj.net.forward(params)
        self.params_ = params
        self.velocity_ = v
        self.phi_ = integrate_flow(v, obj.flow)
        self.phi_inv_ = integrate_inverse(v, obj.flow)
        self.warped_ = warp(obj.moving, self.phi_)
        self.loss_trace_ = trace
        self.n_epochs_ = self.epochs
        self.elapsed_ = time.perf_counter() - start
        self.report_ = self._report(labels_moving, labels_fixed)
        return self

    def _report(self, labels_moving, labels_fixed):
        disp = self.phi_ - identity_grid(self.phi_.shape[1:])
        report = {
            "metric": self.metric,
            "final_loss": self.loss_trace_[-1]["total"],
            "mean_displacement": float(np.mean(np.sqrt(np.sum(disp ** 2, axis=0)))),
            "neg_jac_percent": neg_jac_ratio(self.phi_),
            "min_jacobian": float(np.min(jacobian_det(self.phi_))),
        }
        if labels_moving is not None and labels_fixed is not None:
            warped_labels = self.transform_labels(labels_moving)
            per_label, mean = dice(warped_labels, labels_fixed)
            report["dice_per_label"] = per_label
            report["mean_dice"] = mean
        return report

    def transform(self, image):
        """Warp an image on the moving grid onto the fixed grid."""
        check_is_fitted(self, "phi_")
        return warp(image, self.phi_)

    def inverse_transform(self, image):
        """Warp an image on the fixed grid back onto the moving grid."""
        check_is_fitted(self, "phi_inv_")
        return warp(image, self.phi_inv_)

    def transform_labels(self, labels):
        """Nearest-neighbour warp of a label volume."""
        check_is_fitted(self, "phi_")
        return sample_nearest(np.asarray(labels), self.phi_)

    def result(self):
        check_is_fitted(self, "phi_")
        return RegistrationResult(self.phi_, self.phi_inv_, self.warped_, self.velocity_,
                                  self.params_, self.loss_trace_, self.report_)


def register(fixed, moving, loss=None, flow=None, kernel=None, seed=0, labels_fixed=None,
             labels_moving=None, width=32, scheme=None, lmi=None, descriptor=None):
    """Functional front end of :class:`NeuralODERegistration`.

    Returns a :class:`RegistrationResult`.
    """
    loss = loss or LossConfig()
    flow = flow or FlowConfig()
    fixed = np.asarray(fixed, dtype=np.float64)
    kernel = kernel or KernelSpec(fixed.shape)
    scheme = scheme or SearchScheme(ndim=fixed.ndim)
    lmi = lmi or LmiSpec()
    est = NeuralODERegistration(
        metric=loss.metric, lambda_J=loss.lambda_J, lambda_grad=loss.lambda_grad,
        lambda_mag=loss.lambda_mag, epsilon=loss.epsilon, epochs=loss.epochs, lr=loss.lr,
        h=flow.h, t0=flow.t0, t1=flow.t1, gamma=kernel.gamma, alpha=kernel.alpha,
        s=kernel.s, spacing=kernel.spacing, width=width,
        radius=scheme.radius, dilation=scheme.dilation, bins=lmi.bins,
        patch_side=lmi.patch_side, bandwidth=lmi.bandwidth, descriptor=descriptor,
        checkpoint_every=flow.checkpoint_every, seed=seed)
    est.fit(moving, fixed, labels_moving, labels_fixed)
    return est.result()


def config_fields(cls):
    return [f.name for f in fields(cls)]


__all__ = [
    "LossConfig", "NumericalError", "RegistrationObjective", "NeuralODERegistration",
    "RegistrationResult", "loss_jacobian_penalty", "loss_gradient_smoothness",
    "loss_magnitude", "total_loss", "loss_gradient_wrt_params", "register",
]
