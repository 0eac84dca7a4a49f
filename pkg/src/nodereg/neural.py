"""A small closed set of differentiable layers and the two networks built from them.

Activations are channel-first arrays ``(C, *spatial)`` (batch size one).
Each layer caches what its backward pass needs during ``forward``; the
backward pass accumulates parameter gradients into a dict and returns the
gradient with respect to the layer input.
"""

import io

import numpy as np

from ._validation import check_random_state, check_volume
from .spectral import KernelSpec, build_multiplier

CHECKPOINT_MAGIC = "NODEREG-PARAMS 1"


class NetParams:
    """Named parameter blocks plus Adam moment estimates and a step counter."""

    def __init__(self, blocks=None):
        self.blocks = {k: np.asarray(v, dtype=np.float64) for k, v in (blocks or {}).items()}
        self.m = {k: np.zeros_like(v) for k, v in self.blocks.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.blocks.items()}
        self.step = 0

    def __getitem__(self, key):
        return self.blocks[key]

    def __setitem__(self, key, value):
        value = np.asarray(value, dtype=np.float64)
        self.blocks[key] = value
        self.m[key] = np.zeros_like(value)
        self.v[key] = np.zeros_like(value)

    def __contains__(self, key):
        return key in self.blocks

    def keys(self):
        return self.blocks.keys()

    def copy(self):
        out = NetParams({k: v.copy() for k, v in self.blocks.items()})
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.blocks.items()}

    @property
    def size(self):
        return int(sum(v.size for v in self.blocks.values()))

    def flat(self):
        return np.concatenate([self.blocks[k].ravel() for k in self.blocks])

    def set_flat(self, x):
        x = np.asarray(x, dtype=np.float64)
        pos = 0
        for k, v in self.blocks.items():
            self.blocks[k] = x[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size


def flatten_grads(params, grads):
    return np.concatenate([grads[k].ravel() for k in params.keys()])


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update applied in place; returns ``params``."""
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in params.keys():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != params.blocks[k].shape:
            raise ValueError(
                f"gradient for {k!r} has shape {g.shape}, expected {params.blocks[k].shape}")
        params.m[k] = beta1 * params.m[k] + (1.0 - beta1) * g
        params.v[k] = beta2 * params.v[k] + (1.0 - beta2) * g * g
        mhat = params.m[k] / c1
        vhat = params.v[k] / c2
        params.blocks[k] = params.blocks[k] - lr * mhat / (np.sqrt(vhat) + eps)
    return params


def save_params(params, path):
    """Write a text manifest (name and shape per block) then float64 LE payload."""
    lines = [CHECKPOINT_MAGIC, f"step {params.step}"]
    for k, v in params.blocks.items():
        lines.append(f"{k} " + " ".join(str(n) for n in v.shape))
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for v in params.blocks.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.readline().decode("ascii", "replace").strip() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    step_line = buf.readline().decode("ascii").split()
    step = int(step_line[1])
    manifest = []
    while True:
        line = buf.readline()
        if not line:
            raise ValueError(f"{path}: truncated manifest")
        line = line.decode("ascii").strip()
        if line == "END":
            break
        name, *dims = line.split()
        manifest.append((name, tuple(int(n) for n in dims)))
    blocks = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError(f"{path}: truncated payload in block {name!r}")
        blocks[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    params = NetParams(blocks)
    params.step = step
    return params


# ---------------------------------------------------------------------------
# layers


class Conv:
    """3^d cross-correlation with zero padding one and stride 1 or 2."""

    def __init__(self, name, c_in, c_out, ndim, stride=1, activation=None):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.name, self.c_in, self.c_out = name, c_in, c_out
        self.ndim, self.stride, self.activation = ndim, stride, activation
        self.kshape = (3,) * ndim

    def init(self, params, rng, zero=False):
        fan_in = self.c_in * 3 ** self.ndim
        bound = fan_in ** -0.5
        wshape = (self.c_out, self.c_in) + self.kshape
        if zero:
            params[self.name + ".w"] = np.zeros(wshape)
            params[self.name + ".b"] = np.zeros(self.c_out)
        else:
            params[self.name + ".w"] = rng.uniform(-bound, bound, wshape)
            params[self.name + ".b"] = rng.uniform(-bound, bound, self.c_out)

    def out_shape(self, shape):
        return tuple((n - 1) // self.stride + 1 for n in shape)

    def _slices(self, k, out):
        s = self.stride
        return (slice(None),) + tuple(slice(k[a], k[a] + s * (out[a] - 1) + 1, s)
                                      for a in range(self.ndim))

    def forward(self, params, x):
        if x.shape[0] != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} channels, got {x.shape[0]}")
        shape = x.shape[1:]
        out = self.out_shape(shape)
        xp = np.pad(x, [(0, 0)] + [(1, 1)] * self.ndim)
        cols = np.stack([xp[self._slices(k, out)] for k in np.ndindex(*self.kshape)], axis=1)
        cols = cols.reshape(self.c_in * 3 ** self.ndim, -1)
        W = params[self.name + ".w"].reshape(self.c_out, -1)
        y = (W @ cols + params[self.name + ".b"][:, None]).reshape((self.c_out,) + out)
        self._cache = (shape, out, cols)
        return y

    def backward(self, params, grads, g):
        shape, out, cols = self._cache
        g2 = g.reshape(self.c_out, -1)
        if grads is not None:
            grads[self.name + ".w"] += (g2 @ cols.T).reshape(grads[self.name + ".w"].shape)
            grads[self.name + ".b"] += g2.sum(axis=1)
        W = params[self.name + ".w"].reshape(self.c_out, -1)
        gcols = (W.T @ g2).reshape((self.c_in, 3 ** self.ndim) + out)
        gxp = np.zeros((self.c_in,) + tuple(n + 2 for n in shape))
        for i, k in enumerate(np.ndindex(*self.kshape)):
            gxp[self._slices(k, out)] += gcols[:, i]
        return gxp[(slice(None),) + tuple(slice(1, n + 1) for n in shape)]


class Pointwise:
    """Per-voxel linear map between channels (a 1x1 convolution)."""

    def __init__(self, name, c_in, c_out):
        self.name, self.c_in, self.c_out = name, c_in, c_out

    def init(self, params, rng, zero=False):
        bound = self.c_in ** -0.5
        if zero:
            params[self.name + ".w"] = np.zeros((self.c_out, self.c_in))
            params[self.name + ".b"] = np.zeros(self.c_out)
        else:
            params[self.name + ".w"] = rng.uniform(-bound, bound, (self.c_out, self.c_in))
            params[self.name + ".b"] = rng.uniform(-bound, bound, self.c_out)

    def forward(self, params, x):
        if x.shape[0] != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} channels, got {x.shape[0]}")
        x2 = x.reshape(self.c_in, -1)
        self._cache = (x.shape, x2)
        y = params[self.name + ".w"] @ x2 + params[self.name + ".b"][:, None]
        return y.reshape((self.c_out,) + x.shape[1:])

    def backward(self, params, grads, g):
        shape, x2 = self._cache
        g2 = g.reshape(self.c_out, -1)
        if grads is not None:
            grads[self.name + ".w"] += g2 @ x2.T
            grads[self.name + ".b"] += g2.sum(axis=1)
        return (params[self.name + ".w"].T @ g2).reshape(shape)


class LeakyReLU:
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, g):
        return np.where(self._mask, g, self.slope * g)


def linear_resize_matrix(n_in, n_out):
    """Matrix of 1-D linear interpolation with aligned end points."""
    M = np.zeros((n_out, n_in))
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    f = pos - i0
    M[np.arange(n_out), i0] = 1.0 - f
    M[np.arange(n_out), i0 + 1] += f
    return M


class Upsample:
    """Separable multilinear resize to a target spatial shape."""

    def __init__(self, target_shape):
        self.target = tuple(target_shape)

    def forward(self, x):
        shape = x.shape[1:]
        self._mats = [linear_resize_matrix(n, m) for n, m in zip(shape, self.target)]
        y = x
        for a, M in enumerate(self._mats):
            y = np.moveaxis(np.tensordot(M, y, axes=([1], [a + 1])), 0, a + 1)
        return y

    def backward(self, g):
        y = g
        for a, M in enumerate(self._mats):
            y = np.moveaxis(np.tensordot(M.T, y, axes=([1], [a + 1])), 0, a + 1)
        return y


# ---------------------------------------------------------------------------
# networks


def normalized_grid(shape):
    """Coordinate grid scaled to [-1, 1] per axis, shape ``(d, *shape)``."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def zero_boundary_frame(v):
    """Zero a channel-first field on the one-voxel outer frame of its grid."""
    out = v.copy()
    for a in range(1, v.ndim):
        idx = [slice(None)] * v.ndim
        idx[a] = 0
        out[tuple(idx)] = 0.0
        idx[a] = -1
        out[tuple(idx)] = 0.0
    return out


class VelocityNet:
    """Stationary velocity field generator conditioned only on the domain.

    Normalized coordinates pass through a stride-2 convolution, two
    convolutions, two pointwise layers, a linear upsampling back to full
    resolution and the smoothing ``(K* K)^{-1}``. The field is zeroed on the
    outer voxel frame. Output is in voxel units.

    Parameters
    ----------
    kernel : KernelSpec
        Grid shape and smoothing operator.
    width : int
        Hidden channel count.
    slope : float
        LeakyReLU negative slope.
    """

    def __init__(self, kernel, width=32, slope=0.2):
        self.kernel = kernel
        self.shape = kernel.shape
        self.ndim = len(self.shape)
        self.width = width
        d, w = self.ndim, width
        self.layers = [
            Conv("down", d, w, d, stride=2), LeakyReLU(slope),
            Conv("conv1", w, w, d), LeakyReLU(slope),
            Conv("conv2", w, w, d), LeakyReLU(slope),
            Pointwise("lin1", w, w), LeakyReLU(slope),
            Pointwise("lin2", w, d),
        ]
        self.upsample = Upsample(self.shape)
        self.multiplier = build_multiplier(kernel)
        self.grid = normalized_grid(self.shape)

    def init_params(self, seed=None):
        rng = check_random_state(seed)
        params = NetParams()
        trainable = [l for l in self.layers if hasattr(l, "init")]
        for layer in trainable:
            layer.init(params, rng, zero=layer is trainable[-1])
        return params

    def _smooth(self, f):
        axes = tuple(range(1, self.ndim + 1))
        return np.real(np.fft.ifftn(np.fft.fftn(f, axes=axes) / self.multiplier ** 2, axes=axes))

    def forward(self, params):
        x = self.grid
        for layer in self.layers:
            x = layer.forward(params, x) if hasattr(layer, "init") else layer.forward(x)
        x = self.upsample.forward(x)
        return zero_boundary_frame(self._smooth(x))

    def backward(self, params, gv, grads=None):
        """Parameter gradients of ``sum(gv * forward(params))``."""
        if grads is None:
            grads = params.zeros_like()
        g = self._smooth(zero_boundary_frame(gv))
        g = self.upsample.backward(g)
        for layer in reversed(self.layers):
            g = layer.backward(params, grads, g) if hasattr(layer, "init") else layer.backward(g)
        return grads


def velocity_net_forward(params, kernel, width=32):
    """Functional form of :meth:`VelocityNet.forward`."""
    return VelocityNet(kernel, width).forward(params)


class DescriptorUNet:
    """Encoder-decoder feature network with skip connections.

    Two input convolutions, three stride-2 encoder levels, three decoder
    levels with linear upsampling and skip concatenation, two output
    convolutions down to one channel. Any input shape is accepted; decoder
    levels upsample to the exact shape of the matching encoder level.
    """

    def __init__(self, ndim, widths=(16, 32, 64), slope=0.2):
        self.ndim = ndim
        self.widths = tuple(widths)
        w0, w1, w2 = self.widths
        d = ndim
        self.inc = [Conv("in0", 1, w0, d), Conv("in1", w0, w0, d)]
        self.enc = [Conv("enc1", w0, w0, d, 2), Conv("enc2", w0, w1, d, 2),
                    Conv("enc3", w1, w2, d, 2)]
        self.dec = [Conv("dec3", w2 + w1, w1, d), Conv("dec2", w1 + w0, w0, d),
                    Conv("dec1", w0 + w0, w0, d)]
        self.outc = [Conv("out0", w0, w0, d), Conv("out1", w0, 1, d)]
        n_act = len(self.inc) + len(self.enc) + len(self.dec) + 1
        self.acts = [LeakyReLU(slope) for _ in range(n_act)]
        self.ups = [None] * 3

    @property
    def convs(self):
        return self.inc + self.enc + self.dec + self.outc

    def init_params(self, seed=None):
        rng = check_random_state(seed)
        params = NetParams()
        for conv in self.convs:
            conv.init(params, rng)
        return params

    def forward(self, params, image):
        image = check_volume(image, "image")
        if image.ndim != self.ndim:
            raise ValueError(f"expected a {self.ndim}-D image, got shape {image.shape}")
        acts = iter(self.acts)
        x = image[None]
        for conv in self.inc:
            x = next(acts).forward(conv.forward(params, x))
        skips = [x]
        for conv in self.enc:
            x = next(acts).forward(conv.forward(params, x))
            skips.append(x)
        self._split = []
        for level, conv in enumerate(self.dec):
            skip = skips[-2 - level]
            self.ups[level] = Upsample(skip.shape[1:])
            up = self.ups[level].forward(x)
            self._split.append(up.shape[0])
            x = next(acts).forward(conv.forward(params, np.concatenate([up, skip])))
        x = next(acts).forward(self.outc[0].forward(params, x))
        return self.outc[1].forward(params, x)[0]

    def backward(self, params, gF, grads=None, need_params=True):
        """Back-propagate ``gF``; returns ``(param_grads or None, grad_image)``."""
        if grads is None and need_params:
            grads = params.zeros_like()
        pg = grads if need_params else None
        acts = list(self.acts)
        g = self.outc[1].backward(params, pg, np.asarray(gF)[None])
        g = self.outc[0].backward(params, pg, acts.pop().backward(g))
        skip_grads = [None] * 3
        for level in reversed(range(3)):
            conv = self.dec[level]
            g = conv.backward(params, pg, acts.pop().backward(g))
            n_up = self._split[level]
            skip_grads[level] = g[n_up:]
            g = self.ups[level].backward(g[:n_up])
        # decoder level k consumed the input of encoder stage 2 - k
        for i in reversed(range(3)):
            g = self.enc[i].backward(params, pg, acts.pop().backward(g))
            g = g + skip_grads[2 - i]
        for conv in reversed(self.inc):
            g = conv.backward(params, pg, acts.pop().backward(g))
        return grads, g[0]


def descriptor_net_forward(params, image, widths=(16, 32, 64)):
    """Functional form of :meth:`DescriptorUNet.forward`."""
    image = np.asarray(image, dtype=np.float64)
    return DescriptorUNet(image.ndim, widths).forward(params, image)


def layer_specs(net):
    """Ordered (name, type, channels in/out, stride) rows for inspection."""
    rows = []
    layers = net.layers if isinstance(net, VelocityNet) else net.convs
    for layer in layers:
        if isinstance(layer, Conv):
            rows.append((layer.name, "conv", layer.c_in, layer.c_out, layer.stride))
        elif isinstance(layer, Pointwise):
            rows.append((layer.name, "pointwise", layer.c_in, layer.c_out, 1))
    return rows


__all__ = [
    "NetParams", "flatten_grads", "adam_step", "save_params", "load_params", "Conv", "Pointwise",
    "LeakyReLU", "Upsample", "VelocityNet", "DescriptorUNet", "KernelSpec",
    "velocity_net_forward", "descriptor_net_forward", "normalized_grid",
    "zero_boundary_frame", "layer_specs", "linear_resize_matrix",
]
