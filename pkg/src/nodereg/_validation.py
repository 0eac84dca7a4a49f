"""Input validation helpers shared by the public functions and estimators."""

import numpy as np


def check_volume(volume, name="volume", min_size=1, ndim=None):
    """Return ``volume`` as a finite float64 array.

    Parameters
    ----------
    volume : array-like
        Scalar field on a regular grid.
    name : str
        Used in error messages.
    min_size : int
        Minimum extent required along every axis.
    ndim : int or None
        Required number of spatial dimensions, if any.
    """
    arr = np.asarray(volume, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError(f"{name} must have at least one spatial axis")
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if min(arr.shape) < min_size:
        raise ValueError(
            f"{name} needs every axis of size >= {min_size}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_field(field, name="field", shape=None, min_size=1):
    """Return ``field`` as a channel-first vector field ``(d, *spatial)``.

    The number of channels must equal the number of spatial axes.
    """
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"{name} must be channel-first (d, *spatial)")
    if arr.shape[0] != arr.ndim - 1:
        raise ValueError(
            f"{name} has {arr.shape[0]} channels for {arr.ndim - 1} spatial "
            f"axes; channels must equal the spatial dimension")
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise ValueError(
            f"{name} spatial shape {arr.shape[1:]} does not match {tuple(shape)}")
    if min(arr.shape[1:]) < min_size:
        raise ValueError(
            f"{name} needs every axis of size >= {min_size}, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ValueError(
            f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_spacing(spacing, ndim):
    if spacing is None:
        return np.ones(ndim)
    sp = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (ndim,)).copy()
    if np.any(sp <= 0) or not np.all(np.isfinite(sp)):
        raise ValueError(f"spacing must be positive, got {spacing}")
    return sp


def check_random_state(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
