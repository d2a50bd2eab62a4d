"""Invertible layers: couplings, channel permutations, invertible down/upsampling,
split/merge and flatten.

Layers map towards the latent space in ``forward`` and back in ``inverse``.
``forward`` returns ``(y, logdet)`` where ``logdet`` is a per-sample (B,)
tensor, or ``None`` for volume-preserving layers.

Tensors are batched: images are (B, C, H, W), vectors (B, D). Coupling
partitions are along axis 1: the first ceil(C/2) entries pass through, the
rest are transformed.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import ops
from .engine.params import seeded_rng
from .engine.tensor import NonFiniteError, ShapeError, Tape, Tensor, active_tape, no_grad

HAAR = 0.5 * np.array([[1, 1, 1, 1],
                       [1, -1, 1, -1],
                       [1, 1, -1, -1],
                       [1, -1, -1, 1]], dtype=np.float64)


class Layer:
    """Base class. Subclasses override ``forward``/``inverse``."""

    volume_preserving = True
    name = "layer"

    def forward(self, x, h=None):
        raise NotImplementedError

    def inverse(self, y, h=None):
        raise NotImplementedError

    def out_shape(self, shape):
        return shape

    def config(self):
        return {"type": type(self).__name__, "name": self.name}

    # state-level hooks used by FlowModel; most layers act on the main tensor only
    def apply(self, state, feats):
        state.x, logdet = self.forward(state.x, self._cond(feats))
        return logdet

    def unapply(self, state, feats):
        state.x = self.inverse(state.x, self._cond(feats))

    def _cond(self, feats):
        return None


# --------------------------------------------------------------------------------
# coupling subnetworks

class Subnet:
    """Small non-invertible network used inside couplings.

    ``kind`` is "conv3", "conv1" (image inputs) or "dense" (vector inputs).
    Hidden layers use a leaky rectifier; the output layer starts at zero.
    """

    def __init__(self, store, prefix, in_ch, out_ch, hidden=32, kind="conv3", depth=2):
        if kind not in ("conv3", "conv1", "dense"):
            raise ValueError(f"unknown subnet kind {kind!r}")
        self.store = store
        self.prefix = prefix
        self.kind = kind
        widths = [in_ch] + [hidden] * (depth - 1) + [out_ch]
        self.n_layers = len(widths) - 1
        k = {"conv3": 3, "conv1": 1, "dense": None}[kind]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == self.n_layers - 1
            init = "zeros" if last else "he"
            if kind == "dense":
                store.add(f"{prefix}.w{i}", (a, b), init=init, fan_in=a)
            else:
                store.add(f"{prefix}.w{i}", (b, a, k, k), init=init, fan_in=a * k * k)
            store.add(f"{prefix}.b{i}", (b,), init="zeros")

    def __call__(self, x):
        s = self.store
        for i in range(self.n_layers):
            w, b = s[f"{self.prefix}.w{i}"], s[f"{self.prefix}.b{i}"]
            x = ops.matmul(x, w) if self.kind == "dense" else ops.conv2d(x, w)
            x = ops.bias_add(x, b)
            if i < self.n_layers - 1:
                x = ops.leaky_relu(x)
        return x


class CouplingLayer(Layer):
    """Additive or affine coupling, optionally conditioned on a feature tensor.

    additive:  y2 = x2 + M(x1, h)
    affine:    y2 = x2 * exp(s') + t,  s' = clamp * tanh(s / clamp),  [s, t] = M(x1, h)

    ``clamp=None`` disables the soft clamp (raw exponential scale).
    ``recompute=True`` keeps no activations on the outer tape; they are
    rebuilt from the layer output during backward.
    """

    def __init__(self, store, name, shape, kind="affine", subnet="conv3", hidden=32, depth=2,
                 cond_shape=None, cond_slot=None, clamp=2.0, recompute=False):
        if kind not in ("affine", "additive"):
            raise ValueError(f"unknown coupling kind {kind!r}")
        channels = shape[0]
        if channels < 2:
            raise ShapeError("coupling", shape, detail="need at least 2 channels to partition")
        if (subnet == "dense") != (len(shape) == 1):
            raise ValueError("dense subnets go with vector inputs, conv subnets with images")
        if cond_shape is not None and tuple(cond_shape[1:]) != tuple(shape[1:]):
            raise ShapeError("coupling", shape, cond_shape, detail="condition extent mismatch")
        self.name = name
        self.shape = tuple(shape)
        self.kind = kind
        self.c1 = math.ceil(channels / 2)
        self.c2 = channels - self.c1
        self.clamp = clamp
        self.cond_shape = None if cond_shape is None else tuple(cond_shape)
        self.cond_slot = cond_slot
        self.recompute = recompute
        self.volume_preserving = kind == "additive"
        cond_ch = 0 if cond_shape is None else cond_shape[0]
        out_ch = self.c2 * (2 if kind == "affine" else 1)
        self.subnet_kind = subnet
        self.hidden = hidden
        self.depth = depth
        self.net = Subnet(store, f"{name}.net", self.c1 + cond_ch, out_ch, hidden, subnet, depth)

    @property
    def conditional(self):
        return self.cond_shape is not None

    def config(self):
        return {"type": "CouplingLayer", "name": self.name, "shape": list(self.shape),
                "kind": self.kind, "subnet": self.subnet_kind, "hidden": self.hidden,
                "depth": self.depth, "clamp": self.clamp, "cond_slot": self.cond_slot,
                "cond_shape": None if self.cond_shape is None else list(self.cond_shape)}

    def _cond(self, feats):
        if not self.conditional:
            return None
        if feats is None:
            raise ValueError(f"{self.name}: conditional layer needs conditioning features")
        return feats.slot(self.cond_slot)

    def _check(self, x, h):
        if tuple(x.shape[1:]) != self.shape:
            raise ShapeError(self.name, x.shape, self.shape)
        if self.conditional:
            if h is None:
                raise ValueError(f"{self.name}: conditional layer called without h")
            if tuple(h.shape[1:]) != self.cond_shape or h.shape[0] != x.shape[0]:
                raise ShapeError(self.name, x.shape, h.shape, detail="conditioning mismatch")

    def _params(self, x1, h):
        inp = ops.concat([x1, h], axis=1) if h is not None else x1
        out = self.net(inp)
        if self.kind == "additive":
            return None, out
        s = ops.slice_axis(out, 1, 0, self.c2)
        t = ops.slice_axis(out, 1, self.c2)
        if self.clamp is not None:
            s = ops.mul(ops.tanh(ops.mul(s, 1.0 / self.clamp)), self.clamp)
        return s, t

    def _forward(self, x, h):
        x1 = ops.slice_axis(x, 1, 0, self.c1)
        x2 = ops.slice_axis(x, 1, self.c1)
        s, t = self._params(x1, h)
        if s is None:
            return ops.concat([x1, ops.add(x2, t)], axis=1), None
        y2 = ops.add(ops.mul(x2, ops.exp(s)), t)
        axes = tuple(range(1, x.ndim))
        return ops.concat([x1, y2], axis=1), ops.sum(s, axis=axes)

    def forward(self, x, h=None):
        self._check(x, h)
        if self.recompute and active_tape() is not None:
            return self._forward_recompute(x, h)
        return self._forward(x, h)

    def inverse(self, y, h=None):
        self._check(y, h)
        y1 = ops.slice_axis(y, 1, 0, self.c1)
        y2 = ops.slice_axis(y, 1, self.c1)
        s, t = self._params(y1, h)
        x2 = ops.sub(y2, t)
        if s is not None:
            x2 = ops.mul(x2, ops.exp(ops.neg(s)))
        return ops.concat([y1, x2], axis=1)

    def _forward_recompute(self, x, h):
        from .engine.ops import record_custom
        with no_grad():
            y, ld = self._forward(x, h)
        y = Tensor(y.data)
        ld = Tensor(np.zeros(x.shape[0], dtype=x.dtype) if ld is None else ld.data)
        h_const = None if h is None else Tensor(h.data)

        def vjp(grads):
            gy, gld = grads
            with no_grad():
                x_rec = self.inverse(Tensor(y.data), h_const).data
            xl = Tensor(x_rec, requires_grad=True)
            hl = None if h is None else Tensor(h.data, requires_grad=h.requires_grad)
            with Tape() as sub:
                y2, ld2 = self._forward(xl, hl)
                obj = ops.sum(ops.mul(y2, gy))
                if ld2 is not None:
                    obj = ops.add(obj, ops.sum(ops.mul(ld2, gld)))
            wrt = [xl] + ([hl] if hl is not None else [])
            g = sub.backward(obj, wrt=wrt)
            return g if h is not None else g[:1]

        inputs = (x,) if h is None else (x, h)
        record_custom("coupling_recompute", inputs, (y, ld), vjp)
        return y, (None if self.volume_preserving else ld)


# --------------------------------------------------------------------------------
# permutations

class ChannelShuffle(Layer):
    """Fixed random reindexing of axis 1."""

    def __init__(self, channels, seed, name="shuffle", perm=None):
        self.name = name
        self.seed = seed
        self.channels = channels
        self.perm = np.asarray(perm) if perm is not None else seeded_rng(seed, name).permutation(channels)
        self.inv = np.argsort(self.perm)

    def config(self):
        return {"type": "ChannelShuffle", "name": self.name, "channels": self.channels,
                "seed": self.seed}

    def forward(self, x, h=None):
        if x.shape[1] != self.channels:
            raise ShapeError(self.name, x.shape, (self.channels,))
        return ops.take(x, self.perm, axis=1), None

    def inverse(self, y, h=None):
        return ops.take(y, self.inv, axis=1)


def random_orthogonal(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class OrthogonalMix(Layer):
    """Fixed orthogonal channel mixing: a frozen 1x1 convolution (or dense map)."""

    def __init__(self, channels, seed, name="mix"):
        self.name = name
        self.seed = seed
        self.channels = channels
        self.q = random_orthogonal(channels, seeded_rng(seed, name))

    def config(self):
        return {"type": "OrthogonalMix", "name": self.name, "channels": self.channels,
                "seed": self.seed}

    def _apply(self, x, q):
        q = q.astype(x.dtype)
        if x.ndim == 2:
            return ops.matmul(x, q.T)
        return ops.conv2d(x, q[:, :, None, None])

    def forward(self, x, h=None):
        if x.shape[1] != self.channels:
            raise ShapeError(self.name, x.shape, (self.channels,))
        return self._apply(x, self.q), None

    def inverse(self, y, h=None):
        return self._apply(y, self.q.T)


# --------------------------------------------------------------------------------
# invertible resampling

def _haar_weight(channels, dtype):
    """4C x 4C block matrix applying the orthonormal 2x2 Haar basis per channel."""
    return np.kron(HAAR, np.eye(channels)).astype(dtype)[:, :, None, None]


def haar_downsample(x):
    """(B, C, H, W) -> (B, 4C, H/2, W/2): groups [average, horizontal, vertical, diagonal]."""
    x4 = ops.space_to_depth(x)
    return ops.conv2d(x4, _haar_weight(x.shape[1], x.dtype))


def haar_upsample(x4):
    if x4.ndim != 4 or x4.shape[1] % 4:
        raise ShapeError("haar_upsample", x4.shape)
    y = ops.conv2d(x4, _haar_weight(x4.shape[1] // 4, x4.dtype))  # the Haar matrix is its own inverse
    return ops.depth_to_space(y)


def checkerboard_downsample(x):
    return ops.space_to_depth(x)


def checkerboard_upsample(x4):
    return ops.depth_to_space(x4)


class Downsample(Layer):
    """Invertible 2x downsampling, (C, H, W) -> (4C, H/2, W/2)."""

    def __init__(self, kind="haar", name="down"):
        if kind not in ("haar", "checkerboard"):
            raise ValueError(f"unknown downsampling {kind!r}")
        self.kind = kind
        self.name = name

    def config(self):
        return {"type": type(self).__name__, "name": self.name, "kind": self.kind}

    def out_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(self.name, shape, detail="odd spatial extent")
        return (4 * c, h // 2, w // 2)

    def forward(self, x, h=None):
        return (haar_downsample(x) if self.kind == "haar" else checkerboard_downsample(x)), None

    def inverse(self, y, h=None):
        return haar_upsample(y) if self.kind == "haar" else checkerboard_upsample(y)


class Upsample(Downsample):
    """Inverse of :class:`Downsample`, used on the expanding path of the iUNet."""

    def out_shape(self, shape):
        c, h, w = shape
        if c % 4:
            raise ShapeError(self.name, shape, detail="channels not divisible by 4")
        return (c // 4, 2 * h, 2 * w)

    def forward(self, x, h=None):
        return Downsample.inverse(self, x), None

    def inverse(self, y, h=None):
        return Downsample.forward(self, y)[0]


# --------------------------------------------------------------------------------
# shape plumbing

class Split(Layer):
    """Send the trailing ``n_out`` channels to the latent output or the skip stack."""

    def __init__(self, in_shape, n_out, dest="output", name="split"):
        if not 0 < n_out < in_shape[0]:
            raise ShapeError(name, in_shape, detail=f"cannot split off {n_out} channels")
        if dest not in ("output", "skip"):
            raise ValueError("dest must be 'output' or 'skip'")
        self.name = name
        self.in_shape = tuple(in_shape)
        self.n_keep = in_shape[0] - n_out
        self.n_out = n_out
        self.dest = dest

    @property
    def part_shape(self):
        return (self.n_out,) + self.in_shape[1:]

    def config(self):
        return {"type": "Split", "name": self.name, "in_shape": list(self.in_shape),
                "n_out": self.n_out, "dest": self.dest}

    def out_shape(self, shape):
        return (self.n_keep,) + tuple(shape[1:])

    def forward(self, x, h=None):
        return (ops.slice_axis(x, 1, 0, self.n_keep), ops.slice_axis(x, 1, self.n_keep)), None

    def inverse(self, parts, h=None):
        return ops.concat(list(parts), axis=1)

    def apply(self, state, feats):
        (keep, out), _ = self.forward(state.x)
        (state.outputs if self.dest == "output" else state.skips).append(out)
        state.x = keep
        return None

    def unapply(self, state, feats):
        part = state.outputs.pop() if self.dest == "output" else state.skips.pop()
        state.x = self.inverse((state.x, part))


class Merge(Layer):
    """Concatenate the most recent skip tensor back onto the main path."""

    def __init__(self, in_shape, skip_channels, name="merge"):
        self.name = name
        self.in_shape = tuple(in_shape)
        self.skip_channels = skip_channels

    def config(self):
        return {"type": "Merge", "name": self.name, "in_shape": list(self.in_shape),
                "skip_channels": self.skip_channels}

    def out_shape(self, shape):
        return (shape[0] + self.skip_channels,) + tuple(shape[1:])

    def apply(self, state, feats):
        state.x = ops.concat([state.x, state.skips.pop()], axis=1)
        return None

    def unapply(self, state, feats):
        c = self.in_shape[0]
        state.skips.append(ops.slice_axis(state.x, 1, c))
        state.x = ops.slice_axis(state.x, 1, 0, c)


class Flatten(Layer):
    def __init__(self, in_shape, name="flatten"):
        self.name = name
        self.in_shape = tuple(in_shape)

    def config(self):
        return {"type": "Flatten", "name": self.name, "in_shape": list(self.in_shape)}

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, h=None):
        return ops.reshape(x, (x.shape[0], -1)), None

    def inverse(self, y, h=None):
        return ops.reshape(y, (y.shape[0],) + self.in_shape)


def check_layer_output(arr, layer, index):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"layer {layer.name!r}", index)
