"""Forward Euler flow of a stationary velocity field and its reverse sweep.

``Phi_{k+1}(x) = Phi_k(x) + h * v(Phi_k(x))`` with ``Phi_0 = id``. The
gradient of any loss of ``Phi_N`` with respect to ``v`` is obtained by
running the transposed recursion backwards in time; the adjoint state
``lam`` follows ``lam_k = lam_{k+1} + h * (dv/dx at Phi_k)^T lam_{k+1}``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_field, check_volume
from .grid import identity_grid, sample_linear, sample_linear_vjp


@dataclass(frozen=True)
class FlowConfig:
    """Euler integration settings on ``[t0, t1]``.

    ``checkpoint_every`` keeps only every n-th state during the forward pass
    and recomputes the rest segment by segment in the reverse sweep.
    """

    h: float = 0.005
    t0: float = 0.0
    t1: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError(f"step h must be positive, got {self.h}")
        steps = (self.t1 - self.t0) / self.h
        if steps < 0.5 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(
                f"(t1 - t0) / h = {steps} is not a positive integer number of steps")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @property
    def n_steps(self):
        return int(round((self.t1 - self.t0) / self.h))


def integrate_flow(v, cfg=None, return_states=False):
    """Map ``Phi`` at ``t1`` obtained by Euler steps through ``v``.

    Parameters
    ----------
    v : ndarray, shape (d, *spatial)
        Stationary velocity in voxel units.
    cfg : FlowConfig
    return_states : bool
        Also return the list of stored states (all states, or only the
        checkpoints when ``cfg.checkpoint_every`` is set).

    Returns
    -------
    phi : ndarray, shape (d, *spatial)
        Positions may leave the grid; they are clamped only when sampled.
    """
    v = check_field(v, "velocity")
    cfg = cfg or FlowConfig()
    phi = identity_grid(v.shape[1:])
    states = [phi]
    every = cfg.checkpoint_every
    for k in range(cfg.n_steps):
        phi = phi + cfg.h * sample_linear(v, phi)
        if not every or (k + 1) % every == 0:
            states.append(phi)
    return (phi, states) if return_states else phi


def integrate_inverse(v, cfg=None):
    """Approximate inverse map ``Exp(-v)``."""
    return integrate_flow(-check_field(v, "velocity"), cfg)


def _segment(v, start, count, h):
    out = [start]
    phi = start
    for _ in range(count):
        phi = phi + h * sample_linear(v, phi)
        out.append(phi)
    return out


def flow_vjp(v, cfg, grad_phi, states=None):
    """Gradient with respect to ``v`` of ``<grad_phi, Phi_N(v)>``.

    Parameters
    ----------
    v : ndarray
        Velocity used in the forward pass.
    cfg : FlowConfig
    grad_phi : ndarray
        Derivative of the loss with respect to the final map.
    states : list, optional
        States returned by ``integrate_flow(..., return_states=True)``;
        recomputed when omitted.
    """
    v = check_field(v, "velocity")
    if states is None:
        _, states = integrate_flow(v, cfg, return_states=True)
    n, h, every = cfg.n_steps, cfg.h, cfg.checkpoint_every
    lam = np.asarray(grad_phi, dtype=np.float64).copy()
    gv = np.zeros_like(v)
    if every:
        bounds = list(range(0, n, every))
        for seg in reversed(range(len(bounds))):
            k0 = bounds[seg]
            count = min(every, n - k0)
            seg_states = _segment(v, states[seg], count, h)
            for j in reversed(range(count)):
                lam, gv = _reverse_step(v, seg_states[j], lam, gv, h, k0 + j > 0)
    else:
        for k in reversed(range(n)):
            lam, gv = _reverse_step(v, states[k], lam, gv, h, k > 0)
    return gv


def _reverse_step(v, phi_k, lam, gv, h, need_coords):
    g_field, g_coords = sample_linear_vjp(v, phi_k, lam, need_coords=need_coords)
    gv += h * g_field
    if need_coords:
        lam = lam + h * g_coords
    return lam, gv


def warp(image, phi):
    """Pull ``image`` back through ``phi``: ``out(x) = image(phi(x))``."""
    image = np.asarray(image, dtype=np.float64)
    phi = check_field(phi, "map")
    if image.ndim == phi.ndim - 1:
        check_volume(image, "image")
    elif image.ndim != phi.ndim:
        raise ValueError(f"image of shape {image.shape} cannot be warped by a "
                         f"{phi.shape[0]}-D map")
    return sample_linear(image, phi)


def compose(phi, psi):
    """Map ``x -> phi(psi(x))``."""
    return sample_linear(phi, psi)
