"""Synthetic multimodal registration cases with known ground truth.

Phantoms are sums of Gaussian blobs with labels from blob ownership. The
ground-truth transform is the Euler exponential of a smooth random
stationary velocity field, and the fixed image is the warped phantom
passed through a random monotone (optionally inverted) intensity remap.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import augment_modality
from .flow import FlowConfig, integrate_flow, integrate_inverse, warp
from .grid import identity_grid, jacobian_det, sample_nearest
from .io import config_schema, format_config, read_config, read_nifti, write_nifti
from .neural import zero_boundary_frame


@dataclass(frozen=True)
class SynthSpec:
    """Generation parameters for one synthetic case.

    ``warp_amplitude`` is the largest velocity norm in voxels and
    ``warp_smoothness`` the standard deviation (voxels) of the Gaussian
    low-pass applied to white noise.
    """

    shape: tuple = (64, 64)
    seed: int = 0
    warp_amplitude: float = 3.0
    warp_smoothness: float = 10.0
    n_blobs: int = 50
    blob_sigma: tuple = (1.5, 3.0)
    label_count: int = 4
    remap: bool = True
    remap_p: float = 0.5
    remap_n: int = 3
    flow_h: float = 0.01
    taper: int = 8

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "blob_sigma", tuple(float(s) for s in self.blob_sigma))
        if self.warp_amplitude < 0 or self.n_blobs < 0 or self.label_count < 1:
            raise ValueError("invalid synthetic spec")


@dataclass
class RegistrationCase:
    fixed: np.ndarray
    moving: np.ndarray
    labels_fixed: np.ndarray
    labels_moving: np.ndarray
    phi_gt: np.ndarray
    phi_gt_inv: np.ndarray
    v_gt: np.ndarray
    spec: SynthSpec
    info: dict = field(default_factory=dict)


def _rng(spec, stream, attempt=0):
    return np.random.default_rng([spec.seed, stream, attempt])


def make_phantom(spec):
    """Blob phantom in [0, 1] and its label volume.

    Each voxel belongs to the blob with the largest contribution; it gets
    that blob's label (``1 + index % label_count``) when inside the blob's
    half-maximum contour, background 0 otherwise.
    """
    rng = _rng(spec, 0)
    grid = identity_grid(spec.shape)
    image = np.zeros(spec.shape)
    labels = np.zeros(spec.shape, dtype=np.int32)
    if spec.n_blobs == 0:
        return image, labels
    best = np.full(spec.shape, -np.inf)
    owner_inside = np.zeros(spec.shape, dtype=bool)
    for k in range(spec.n_blobs):
        center = rng.uniform(0.0, np.array(spec.shape) - 1.0)
        sigma = rng.uniform(*spec.blob_sigma)
        amp = rng.uniform(0.4, 1.0)
        r2 = np.sum((grid - center.reshape((-1,) + (1,) * len(spec.shape))) ** 2, axis=0)
        shape_k = np.exp(-0.5 * r2 / sigma ** 2)
        contrib = amp * shape_k
        image += contrib
        take = contrib > best
        best = np.where(take, contrib, best)
        labels = np.where(take, 1 + k % spec.label_count, labels)
        owner_inside = np.where(take, shape_k > 0.5, owner_inside)
    labels = np.where(owner_inside, labels, 0).astype(np.int32)
    lo, hi = image.min(), image.max()
    image = (image - lo) / (hi - lo) if hi > lo else np.zeros(spec.shape)
    return image, labels


def _taper(shape, width):
    win = np.ones(shape)
    for axis, n in enumerate(shape):
        x = np.arange(n, dtype=np.float64)
        dist = np.minimum(x, n - 1 - x)
        ramp = np.clip(dist / max(width, 1), 0.0, 1.0)
        ramp = 0.5 - 0.5 * np.cos(np.pi * ramp)
        sh = [1] * len(shape)
        sh[axis] = n
        win = win * ramp.reshape(sh)
    return win


def smooth_random_field(shape, amplitude, smoothness, rng, taper=8):
    """White noise low-passed by a Gaussian in Fourier space, tapered at the
    border and scaled so its largest vector norm equals ``amplitude``."""
    d = len(shape)
    noise = rng.standard_normal((d,) + tuple(shape))
    gauss = np.ones(shape)
    for axis, n in enumerate(shape):
        k = np.fft.fftfreq(n)
        sh = [1] * d
        sh[axis] = n
        gauss = gauss * np.exp(-0.5 * (2 * np.pi * k * smoothness) ** 2).reshape(sh)
    axes = tuple(range(1, d + 1))
    v = np.real(np.fft.ifftn(np.fft.fftn(noise, axes=axes) * gauss, axes=axes))
    v = zero_boundary_frame(v * _taper(shape, taper))
    peak = np.max(np.sqrt(np.sum(v ** 2, axis=0)))
    return v * (amplitude / peak) if peak > 0 else np.zeros_like(v)


def make_ground_truth_warp(spec, max_tries=10):
    """Fold-free ``(v, Exp(v), Exp(-v))``; resamples the field on failure."""
    cfg = FlowConfig(h=spec.flow_h)
    for attempt in range(max_tries):
        v = smooth_random_field(spec.shape, spec.warp_amplitude, spec.warp_smoothness,
                                _rng(spec, 1, attempt), spec.taper)
        phi = integrate_flow(v, cfg)
        det = jacobian_det(phi)
        inner = det[tuple(slice(1, n - 1) for n in spec.shape)]
        if np.all(inner > 0):
            return v, phi, integrate_inverse(v, cfg)
    raise RuntimeError(f"no fold-free warp after {max_tries} attempts (seed {spec.seed})")


def make_pair(spec):
    """A :class:`RegistrationCase` in which ``fixed`` is ``moving o phi_gt``
    under a modality remap, so a perfect registration returns ``phi_gt``."""
    moving, labels_moving = make_phantom(spec)
    v, phi, phi_inv = make_ground_truth_warp(spec)
    warped = warp(moving, phi)
    info = {"inverted": False, "curve": None}
    if spec.remap:
        fixed, curve, inverted = augment_modality(
            warped, spec.remap_p, spec.remap_n, _rng(spec, 2), return_params=True)
        info = {"inverted": inverted, "curve": curve.points}
    else:
        fixed = warped
    labels_fixed = sample_nearest(labels_moving, phi).astype(np.int32)
    return RegistrationCase(fixed, moving, labels_fixed, labels_moving, phi, phi_inv, v,
                            spec, info)


def make_suite(n_cases=10, base_seed=0, **overrides):
    """``n_cases`` cases with consecutive seeds and shared settings."""
    return [make_pair(SynthSpec(seed=base_seed + i, **overrides)) for i in range(n_cases)]


CASE_VOLUMES = ("fixed", "moving")
CASE_LABELS = ("labels_fixed", "labels_moving")
CASE_FIELDS = ("phi_gt", "phi_gt_inv", "v_gt")


def save_case(case, directory):
    """Write a case as NIfTI files plus ``case.cfg`` holding its spec.

    Volumes and fields are stored in float32.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name in CASE_VOLUMES:
        write_nifti(out / f"{name}.nii", getattr(case, name))
    for name in CASE_LABELS:
        write_nifti(out / f"{name}.nii", getattr(case, name), label=True)
    for name in CASE_FIELDS:
        write_nifti(out / f"{name}.nii", getattr(case, name), vector=True)
    (out / "case.cfg").write_text(format_config(asdict(case.spec)))


def load_case(directory):
    src = Path(directory)
    spec = SynthSpec(**read_config(src / "case.cfg", config_schema(SynthSpec, exclude=())))
    arrays = {}
    for name in CASE_VOLUMES + CASE_FIELDS:
        arrays[name] = read_nifti(src / f"{name}.nii")[0].astype(np.float64)
    for name in CASE_LABELS:
        arrays[name] = read_nifti(src / f"{name}.nii")[0].astype(np.int32)
    return RegistrationCase(spec=spec, **arrays)
