import numpy as np
import pytest
from sklearn.base import clone

from nodereg.flow import FlowConfig, integrate_flow, warp
from nodereg.grid import identity_grid, jacobian_det
from nodereg.neural import DescriptorUNet, VelocityNet
from nodereg.objective import (LossConfig, NeuralODERegistration, NumericalError,
                               RegistrationObjective, loss_gradient_smoothness,
                               loss_gradient_wrt_params, loss_jacobian_penalty, loss_magnitude,
                               register, total_loss)
from nodereg.similarity import lmi_loss, mind_mse
from nodereg.spectral import KernelSpec, v_norm_sq

from conftest import active_velocity_params, central_fd, fd_check_params, rel_err


def affine_map(shape, A, b=None):
    x = identity_grid(shape)
    out = np.tensordot(np.asarray(A, float), x, axes=1)
    return out if b is None else out + np.asarray(b, float).reshape((-1,) + (1,) * len(shape))


def smooth_pair(shape=(12, 12)):
    x = identity_grid(shape)
    moving = 0.5 + 0.4 * np.sin(x[0] / 2.0) * np.cos(x[1] / 3.0)
    fixed = 1.0 - (0.5 + 0.4 * np.sin((x[0] - 0.7) / 2.0) * np.cos((x[1] + 0.4) / 3.0))
    return fixed, moving


# -- regularizers -------------------------------------------------------------

def test_config_validation():
    for bad in (dict(epsilon=0.0), dict(epsilon=1.0), dict(lambda_J=-1), dict(metric="ncc"),
                dict(epochs=-1)):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_jacobian_penalty_identity_and_reflection():
    ident = identity_grid((6, 6))
    assert loss_jacobian_penalty(ident, 0.1)[0] == 0.0
    # every voxel has det = -0.5, so each contributes 0.1 - (-0.5) = 0.6
    phi = affine_map((6, 6), [[-0.5, 0.0], [0.0, 1.0]])
    value, _ = loss_jacobian_penalty(phi, 0.1)
    assert value * 36 == pytest.approx(0.6 * 36, abs=1e-12)


def test_jacobian_penalty_single_folded_voxel():
    phi = identity_grid((7, 7))
    # moving both axis-0 neighbours of the centre past it by 1.5 gives d(phi_0)/dx_0 = -0.5
    phi[0, 2, 3] += 1.5
    phi[0, 4, 3] -= 1.5
    det = jacobian_det(phi)
    assert det[3, 3] == pytest.approx(-0.5)
    value, _ = loss_jacobian_penalty(phi, 0.1)
    assert np.sum(det <= 0.1) == 1
    expected = 0.6
    assert value * 49 == pytest.approx(expected)


def test_jacobian_penalty_monotone_in_epsilon(rng):
    phi = identity_grid((8, 8)) + 0.6 * rng.standard_normal((2, 8, 8))
    values = [loss_jacobian_penalty(phi, e)[0] for e in (0.1, 0.3, 0.5, 0.9)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_jacobian_penalty_gradient(rng):
    phi = identity_grid((8, 8)) + 0.4 * rng.standard_normal((2, 8, 8))
    _, g = loss_jacobian_penalty(phi, 0.5)
    for _ in range(10):
        idx = (rng.integers(0, 2), rng.integers(0, 8), rng.integers(0, 8))
        fd = central_fd(lambda: loss_jacobian_penalty(phi, 0.5)[0], phi, idx, 1e-7)
        assert abs(g[idx] - fd) < 1e-7


def test_smoothness_of_linear_displacement():
    A = np.array([[0.1, -0.2], [0.3, 0.05]])
    phi = identity_grid((10, 10)) + np.tensordot(A, identity_grid((10, 10)), axes=1)
    value, _ = loss_gradient_smoothness(phi)
    assert value == pytest.approx(np.sum(A ** 2), rel=1e-12)
    assert loss_gradient_smoothness(identity_grid((5, 5, 5)))[0] == 0.0


def test_smoothness_is_quadratic_and_differentiable(rng):
    u = rng.standard_normal((2, 7, 8))
    ident = identity_grid((7, 8))
    l1 = loss_gradient_smoothness(ident + u)[0]
    assert loss_gradient_smoothness(ident + 2 * u)[0] == pytest.approx(4 * l1, rel=1e-12)
    phi = ident + u
    _, g = loss_gradient_smoothness(phi)
    for _ in range(10):
        idx = (rng.integers(0, 2), rng.integers(0, 7), rng.integers(0, 8))
        fd = central_fd(lambda: loss_gradient_smoothness(phi)[0], phi, idx, 1e-6)
        assert rel_err(g[idx], fd, 1e-8) < 1e-7


def test_magnitude_delegates_to_norm(rng):
    v = rng.standard_normal((2, 8, 8))
    spec = KernelSpec((8, 8), gamma=1.0, alpha=0.3)
    assert loss_magnitude(v, spec)[0] == v_norm_sq(v, spec)
    assert loss_magnitude(np.zeros_like(v), spec)[0] == 0.0
    plain = KernelSpec((8, 8), gamma=1.0, alpha=0.0)
    assert loss_magnitude(v, plain)[0] == pytest.approx(np.mean(np.sum(v ** 2, axis=0)))


# -- total loss -----------------------------------------------------------------

def _setup(metric, shape=(12, 12), **loss_kw):
    loss = LossConfig(metric=metric, **loss_kw)
    flow = FlowConfig(h=0.2)
    kernel = KernelSpec(shape)
    kwargs = {"width": 4}
    if metric == "contrastive":
        unet = DescriptorUNet(2, (2, 3, 4))
        kwargs["descriptor"] = (unet, unet.init_params(3))
    if metric == "lmi":
        from nodereg.similarity import LmiSpec
        kwargs["lmi"] = LmiSpec(bins=8, patch_side=6)
    return loss, flow, kernel, kwargs


def test_identical_images_zero_params_give_zero_total():
    image = smooth_pair()[1]
    loss, flow, kernel, kw = _setup("mind")
    params = VelocityNet(kernel, 4).init_params(0)
    assert total_loss(params, (image, image), loss, flow, kernel, **kw) == 0.0


def test_zero_weights_leave_bare_metric():
    fixed, moving = smooth_pair()
    loss, flow, kernel, kw = _setup("mind", lambda_J=0.0, lambda_grad=0.0, lambda_mag=0.0)
    params = active_velocity_params(VelocityNet(kernel, 4))
    obj = RegistrationObjective(fixed, moving, loss, flow, kernel, **kw)
    phi = integrate_flow(obj.net.forward(params), flow)
    bare = mind_mse(warp(moving, phi), fixed)[0]
    assert total_loss(params, (fixed, moving), loss, flow, kernel, **kw) == bare


def test_total_is_weighted_sum_of_terms():
    fixed, moving = smooth_pair()
    loss, flow, kernel, kw = _setup("lmi", lambda_J=1.7, lambda_grad=0.3, lambda_mag=0.01,
                                    epsilon=0.9)
    params = active_velocity_params(VelocityNet(kernel, 4))
    obj = RegistrationObjective(fixed, moving, loss, flow, kernel, **kw)
    v = obj.net.forward(params)
    phi = integrate_flow(v, flow)
    s = lmi_loss(warp(moving, phi), fixed, kw["lmi"])[0]
    lj = loss_jacobian_penalty(phi, 0.9)[0]
    lg = loss_gradient_smoothness(phi)[0]
    lm = loss_magnitude(v, kernel)[0]
    assert lj > 0
    expected = s + 1.7 * lj + 0.3 * lg + 0.01 * lm
    assert abs(total_loss(params, (fixed, moving), loss, flow, kernel, **kw) - expected) < 1e-12


def test_metric_scale_is_linear():
    fixed, moving = smooth_pair()
    loss, flow, kernel, kw = _setup("mind")
    obj = RegistrationObjective(fixed, moving, loss, flow, kernel, **kw)
    s1, g1 = obj.similarity(moving)
    obj.metric_scale = 3.0
    s3, g3 = obj.similarity(moving)
    assert s3 == pytest.approx(3 * s1) and np.allclose(g3, 3 * g1)


@pytest.mark.parametrize("metric", ["mind", "contrastive", "lmi"])
def test_parameter_gradient_matches_fd(metric):
    fixed, moving = smooth_pair()
    loss, flow, kernel, kw = _setup(metric, epsilon=0.9)
    params = active_velocity_params(VelocityNet(kernel, 4))
    grads = loss_gradient_wrt_params(params, (fixed, moving), loss, flow, kernel, **kw)
    f = lambda: total_loss(params, (fixed, moving), loss, flow, kernel, **kw)
    assert fd_check_params(f, params, grads, 6, np.random.default_rng(0)) < 1e-4


def test_contrastive_needs_descriptor():
    fixed, moving = smooth_pair()
    with pytest.raises(ValueError):
        RegistrationObjective(fixed, moving, LossConfig(metric="contrastive"), FlowConfig(),
                              KernelSpec((12, 12)))
    with pytest.raises(ValueError):
        RegistrationObjective(fixed, moving, LossConfig(), FlowConfig(), KernelSpec((10, 12)))


# -- estimator ----------------------------------------------------------------------

def test_identical_pair_stays_near_identity():
    image = smooth_pair((24, 24))[1]
    est = NeuralODERegistration(epochs=20, width=8, h=0.1).fit(image, image)
    assert est.report_["mean_displacement"] < 0.1
    assert est.report_["neg_jac_percent"] == 0.0
    assert len(est.loss_trace_) == 21
    totals = np.array([row["total"] for row in est.loss_trace_])
    assert abs(totals[-1] - totals[0]) < 1e-3
    assert np.all(np.diff(totals[5:]) <= 1e-9)


def test_estimator_is_deterministic_and_records_trace():
    fixed, moving = smooth_pair((16, 16))
    labels = (moving > 0.5).astype(np.int32)
    runs = [NeuralODERegistration(epochs=5, width=4, h=0.25).fit(moving, fixed, labels, labels)
            for _ in range(2)]
    assert np.array_equal(runs[0].phi_, runs[1].phi_)
    assert runs[0].report_ == runs[1].report_
    assert set(runs[0].loss_trace_[0]) == {"epoch", "S", "L_J", "L_grad", "L_mag", "total"}
    assert "mean_dice" in runs[0].report_


def test_transforms_and_functional_front_end():
    fixed, moving = smooth_pair((16, 16))
    est = NeuralODERegistration(epochs=3, width=4, h=0.25).fit(moving, fixed)
    assert np.array_equal(est.transform(moving), est.warped_)
    assert est.inverse_transform(fixed).shape == fixed.shape
    res = register(fixed, moving, LossConfig(epochs=3), FlowConfig(h=0.25), width=4)
    assert np.array_equal(res.phi, est.phi_)


def test_non_finite_loss_raises(monkeypatch):
    fixed, moving = smooth_pair()
    real = RegistrationObjective.evaluate

    def broken(self, params, need_grad=True):
        terms, grads = real(self, params, need_grad)
        return {**terms, "L_J": float("nan")}, grads

    monkeypatch.setattr(RegistrationObjective, "evaluate", broken)
    with pytest.raises(NumericalError, match="L_J"):
        NeuralODERegistration(epochs=2, width=4, h=0.25).fit(moving, fixed)


def test_sklearn_parameter_protocol():
    est = NeuralODERegistration(metric="lmi", epochs=7)
    params = est.get_params()
    assert params["metric"] == "lmi" and params["epochs"] == 7
    copy = clone(est)
    assert copy.get_params() == params and copy is not est
    est.set_params(lambda_J=0.5)
    assert est.lambda_J == 0.5
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((4, 4)))
