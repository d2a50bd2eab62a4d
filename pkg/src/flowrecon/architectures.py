"""Whole-model assembly: multi-scale cINN, invertible UNet and the 28x28
compressed-sensing stack, plus the :class:`FlowModel` container.

Latent ordering: tensors split off to the output are flattened first, in the
order they leave the network, followed by the flattened final main tensor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .distributions import BaseDistribution
from .engine import ops
from .engine.tensor import NonFiniteError, ShapeError, Tensor, as_tensor, no_grad
from .layers import (
    ChannelShuffle,
    CouplingLayer,
    Downsample,
    Flatten,
    Merge,
    OrthogonalMix,
    Split,
    Upsample,
)


class Features(list):
    """Per-level conditioning tensors.

    The list itself holds the main levels (full resolution first). Optional
    extras: ``encoder`` levels (UNet contracting path), a ``dense`` vector and
    the conditioner's image-domain reconstruction ``recon``.
    """

    def __init__(self, levels=(), encoder=None, dense=None, recon=None):
        super().__init__(levels)
        self.encoder = encoder
        self.dense = dense
        self.recon = recon

    def slot(self, key):
        kind, _, idx = key.partition(":")
        if kind == "main":
            return self[int(idx)]
        if kind == "enc":
            return (self.encoder or self)[int(idx)]
        if kind == "dense":
            if self.dense is None:
                raise KeyError("no dense conditioning vector available")
            return self.dense
        raise KeyError(key)

    def map(self, fn):
        return Features([fn(t) for t in self],
                        None if self.encoder is None else [fn(t) for t in self.encoder],
                        None if self.dense is None else fn(self.dense),
                        None if self.recon is None else fn(self.recon))

    def detached(self):
        return self.map(lambda t: Tensor(t.data))

    def repeat(self, n):
        """Tile every tensor ``n`` times along the batch axis (for sampling)."""
        return self.map(lambda t: Tensor(np.repeat(t.data, n, axis=0)))

    def take(self, idx):
        return self.map(lambda t: Tensor(t.data[idx]))


class FlowState:
    __slots__ = ("x", "outputs", "skips")

    def __init__(self, x, outputs=None, skips=None):
        self.x = x
        self.outputs = outputs if outputs is not None else []
        self.skips = skips if skips is not None else []


class FlowModel:
    """An ordered list of invertible layers plus a base density.

    ``forward`` maps data to latent (x -> z) and accumulates the log-determinant
    of that direction, so ``log_prob = base.log_prob(z) + logdet``.
    """

    def __init__(self, layers, input_shape, base, store, kind="custom", spec=None,
                 cond_slots=None, latent_parts=None, check_finite=True):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dim = int(np.prod(self.input_shape))
        self.base = base if isinstance(base, BaseDistribution) else BaseDistribution(base, self.dim)
        self.store = store
        self.kind = kind
        self.spec = spec
        self.cond_slots = dict(cond_slots or {})
        self.latent_parts = [tuple(p) for p in (latent_parts or [self.input_shape])]
        self.check_finite = check_finite
        if sum(int(np.prod(p)) for p in self.latent_parts) != self.dim:
            raise ValueError("latent parts do not cover the input dimension")

    @property
    def conditional(self):
        return bool(self.cond_slots)

    @property
    def couplings(self):
        return [l for l in self.layers if isinstance(l, CouplingLayer)]

    def set_recompute(self, enabled):
        for layer in self.couplings:
            layer.recompute = enabled

    def _check_input(self, x, feats):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("flow_forward", x.shape, self.input_shape)
        if self.conditional and feats is None:
            raise ValueError("model is conditional; pass conditioning features")

    def forward(self, x, feats=None, return_layer_logdets=False):
        x = as_tensor(x, dtype=None if isinstance(x, Tensor) else self.store.dtype)
        self._check_input(x, feats)
        state = FlowState(x)
        total = None
        per_layer = []
        for i, layer in enumerate(self.layers):
            ld = layer.apply(state, feats)
            if self.check_finite and not np.all(np.isfinite(state.x.data)):
                raise NonFiniteError(f"layer {layer.name!r}", i)
            if ld is not None:
                if self.check_finite and not np.all(np.isfinite(ld.data)):
                    raise NonFiniteError(f"layer {layer.name!r} log-determinant", i)
                total = ld if total is None else ops.add(total, ld)
            per_layer.append(ld)
        parts = [ops.flatten(t) if t.ndim > 2 else t for t in state.outputs + [state.x]]
        z = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        if total is None:
            total = Tensor(np.zeros(x.shape[0], dtype=x.dtype))
        if return_layer_logdets:
            return z, total, per_layer
        return z, total

    def inverse(self, z, feats=None):
        z = as_tensor(z, dtype=None if isinstance(z, Tensor) else self.store.dtype)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ShapeError("flow_inverse", z.shape, (self.dim,))
        if self.conditional and feats is None:
            raise ValueError("model is conditional; pass conditioning features")
        B = z.shape[0]
        parts, start = [], 0
        for shape in self.latent_parts:
            n = int(np.prod(shape))
            part = ops.slice_axis(z, 1, start, start + n)
            parts.append(ops.reshape(part, (B,) + shape) if len(shape) > 1 else part)
            start += n
        state = FlowState(parts[-1], outputs=parts[:-1])
        for i in range(len(self.layers) - 1, -1, -1):
            self.layers[i].unapply(state, feats)
            if self.check_finite and not np.all(np.isfinite(state.x.data)):
                raise NonFiniteError(f"inverse of layer {self.layers[i].name!r}", i)
        return state.x

    def log_prob(self, x, feats=None):
        z, logdet = self.forward(x, feats)
        return ops.add(self.base.log_prob(z), logdet)

    def roundtrip_error(self, x, feats=None):
        """max |x - T^-1(T(x))| without recording gradients."""
        with no_grad():
            z, _ = self.forward(x, feats)
            back = self.inverse(z, feats)
        return float(np.max(np.abs(np.asarray(back.data, np.float64) - np.asarray(x, np.float64))))

    def manifest(self):
        return {
            "architecture": self.kind,
            "spec": None if self.spec is None else asdict(self.spec),
            "input_shape": list(self.input_shape),
            "base": self.base.kind,
            "latent_parts": [list(p) for p in self.latent_parts],
            "cond_slots": {k: list(v) for k, v in self.cond_slots.items()},
            "layers": [l.config() for l in self.layers],
        }


# ---------------------------------------------------------------------------------
# builders

@dataclass
class MultiScaleSpec:
    input_shape: tuple = (1, 16, 16)
    scales: int = 3
    couplings_per_block: int = 2
    downsample: str = "haar"
    split_fraction: float = 0.5
    coupling: str = "affine"
    clamp: float | None = 2.0
    permutation: str = "orthogonal"
    subnet_kernel: int = 3
    hidden: int = 32
    subnet_depth: int = 2
    dense_size: int = 0
    dense_couplings: int = 3
    dense_hidden: int = 64
    base: str = "normal"
    cond_channels: int = 0
    dense_cond_dim: int = 0
    seed: int = 0
    recompute: bool = False


@dataclass
class IUNetSpec:
    input_shape: tuple = (1, 16, 16)
    scales: int = 3
    couplings_per_block: int = 1
    downsample: str = "haar"
    skip_fraction: float = 0.5
    coupling: str = "additive"
    clamp: float | None = 2.0
    permutation: str = "orthogonal"
    hidden: int = 32
    subnet_depth: int = 2
    base: str = "normal"
    cond_channels: int = 0
    seed: int = 0
    recompute: bool = False


@dataclass
class CSSpec:
    """The compressed-sensing stack: two downsampling levels, flatten, dense tail."""

    input_shape: tuple = (1, 28, 28)
    repeats: int = 8
    dense_size: int = 128
    dense_couplings: int = 3
    hidden: int = 32
    subnet_depth: int = 2
    dense_hidden: int = 64
    clamp: float | None = 2.0
    base: str = "normal"
    cond_channels: int = 0
    dense_cond_dim: int = 0
    downsample: str = "haar"
    seed: int = 0
    recompute: bool = False


class _Builder:
    def __init__(self, store, seed, recompute):
        self.store = store
        self.seed = seed
        self.recompute = recompute
        self.layers = []
        self.cond_slots = {}
        self.latent_parts = []
        self.count = 0

    def _name(self, tag):
        self.count += 1
        return f"flow.{self.count:03d}.{tag}"

    def coupling(self, shape, kind, subnet, hidden, depth, clamp, slot=None, cond_shape=None):
        if slot is not None:
            self.cond_slots[slot] = tuple(cond_shape)
        self.layers.append(CouplingLayer(
            self.store, self._name(f"{kind}"), shape, kind=kind, subnet=subnet, hidden=hidden,
            depth=depth, cond_shape=cond_shape, cond_slot=slot, clamp=clamp,
            recompute=self.recompute))

    def permute(self, channels, how):
        if how == "orthogonal":
            self.layers.append(OrthogonalMix(channels, self.seed, name=self._name("mix")))
        elif how == "shuffle":
            self.layers.append(ChannelShuffle(channels, self.seed, name=self._name("shuffle")))
        else:
            raise ValueError(f"unknown permutation {how!r}")

    def add(self, layer_cls, *args, **kw):
        layer = layer_cls(*args, name=self._name(layer_cls.__name__.lower()), **kw)
        self.layers.append(layer)
        return layer


def _check_divisible(shape, times, what):
    if len(shape) == 3:
        req = 2 ** times
        if shape[1] % req or shape[2] % req:
            raise ShapeError(what, shape, detail=f"spatial extents must be divisible by {req}")


def _level(input_shape, shape):
    return int(round(math.log2(input_shape[1] // shape[1])))


def _image_cond(spec, input_shape, shape):
    if not spec.cond_channels:
        return None, None
    lvl = _level(input_shape, shape)
    return f"main:{lvl}", (spec.cond_channels,) + tuple(shape[1:])


def build_multiscale(spec: MultiScaleSpec, store):
    """Multi-scale flow: per scale coupling -> downsampling -> coupling -> split.

    The final scale only couples (no downsampling or split). An optional dense
    tail flattens the result, forwards all but ``dense_size`` entries and
    applies dense couplings to the rest. Vector inputs use dense couplings
    and splits only.
    """
    shape = tuple(spec.input_shape)
    L = spec.scales
    if L < 1:
        raise ValueError("need at least one scale")
    _check_divisible(shape, L - 1, "build_multiscale")
    b = _Builder(store, spec.seed, spec.recompute)
    k = spec.couplings_per_block
    subnet = "conv3" if spec.subnet_kernel == 3 else "conv1"

    def image_block(shape):
        if shape[0] < 2:
            return
        slot, cshape = _image_cond(spec, spec.input_shape, shape)
        for _ in range(k):
            b.coupling(shape, spec.coupling, subnet, spec.hidden, spec.subnet_depth, spec.clamp,
                       slot, cshape)
            b.permute(shape[0], spec.permutation)

    def dense_block(shape, n):
        slot = "dense" if spec.dense_cond_dim else None
        cshape = (spec.dense_cond_dim,) if slot else None
        for _ in range(n):
            b.coupling(shape, spec.coupling, "dense", spec.dense_hidden, spec.subnet_depth,
                       spec.clamp, slot, cshape)
            b.permute(shape[0], spec.permutation)

    def split(shape, n_out):
        layer = b.add(Split, shape, n_out, dest="output")
        b.latent_parts.append(layer.part_shape)
        return layer.out_shape(shape)

    if len(shape) == 1:
        for i in range(L):
            dense_block(shape, k)
            if i < L - 1:
                shape = split(shape, max(1, int(shape[0] * spec.split_fraction)))
    else:
        for i in range(L):
            image_block(shape)
            if i < L - 1:
                down = b.add(Downsample, spec.downsample)
                shape = down.out_shape(shape)
                image_block(shape)
                shape = split(shape, max(1, int(shape[0] * spec.split_fraction)))
        if spec.dense_size:
            flat = b.add(Flatten, shape)
            shape = flat.out_shape(shape)
            if shape[0] > spec.dense_size:
                shape = split(shape, shape[0] - spec.dense_size)
            dense_block(shape, spec.dense_couplings)
    b.latent_parts.append(shape)
    return FlowModel(b.layers, spec.input_shape, spec.base, store, kind="multiscale", spec=spec,
                     cond_slots=b.cond_slots, latent_parts=b.latent_parts)


def build_iunet(spec: IUNetSpec, store):
    """Invertible UNet.

    Down block: coupling -> downsampling -> split to the skip stack.
    Bottom: coupling. Up block: merge skip -> upsampling -> coupling.
    Down-path couplings read the conditioner's main (expanding-path) levels,
    up-path couplings its encoder levels.
    """
    shape = tuple(spec.input_shape)
    L = spec.scales
    if len(shape) != 3:
        raise ValueError("the iUNet needs image inputs")
    _check_divisible(shape, L - 1, "build_iunet")
    b = _Builder(store, spec.seed, spec.recompute)

    def block(shape, source):
        if shape[0] < 2:
            return
        slot = cshape = None
        if spec.cond_channels:
            lvl = _level(spec.input_shape, shape)
            slot = f"{source}:{lvl}"
            cshape = (spec.cond_channels,) + tuple(shape[1:])
        for _ in range(spec.couplings_per_block):
            b.coupling(shape, spec.coupling, "conv3", spec.hidden, spec.subnet_depth, spec.clamp,
                       slot, cshape)
            b.permute(shape[0], spec.permutation)

    skips = []
    for _ in range(L - 1):
        block(shape, "main")
        shape = b.add(Downsample, spec.downsample).out_shape(shape)
        n = max(1, int(shape[0] * spec.skip_fraction))
        shape = b.add(Split, shape, n, dest="skip").out_shape(shape)
        skips.append(n)
    block(shape, "main")
    for n in reversed(skips):
        shape = b.add(Merge, shape, n).out_shape(shape)
        shape = b.add(Upsample, spec.downsample).out_shape(shape)
        block(shape, "enc")
    return FlowModel(b.layers, spec.input_shape, spec.base, store, kind="iunet", spec=spec,
                     cond_slots=b.cond_slots, latent_parts=[tuple(spec.input_shape)])


def build_cs_multiscale(spec: CSSpec | None = None, store=None):
    """Downsample -> conditional section -> downsample -> conditional section ->
    flatten -> split -> dense conditional section.

    A conditional section repeats [affine coupling (1x1 subnet), orthogonal
    1x1 mix, affine coupling (3x3 subnet), orthogonal 1x1 mix]; the dense
    section repeats [random permutation, affine coupling (dense subnet)].
    """
    spec = spec or CSSpec()
    if store is None:
        raise ValueError("a ParameterStore is required")
    shape = tuple(spec.input_shape)
    _check_divisible(shape, 2, "build_cs_multiscale")
    b = _Builder(store, spec.seed, spec.recompute)
    for _ in range(2):
        shape = b.add(Downsample, spec.downsample).out_shape(shape)
        slot, cshape = _image_cond(spec, spec.input_shape, shape)
        for _ in range(spec.repeats):
            for subnet in ("conv1", "conv3"):
                b.coupling(shape, "affine", subnet, spec.hidden, spec.subnet_depth, spec.clamp,
                           slot, cshape)
                b.permute(shape[0], "orthogonal")
    shape = b.add(Flatten, shape).out_shape(shape)
    if shape[0] > spec.dense_size:
        split = b.add(Split, shape, shape[0] - spec.dense_size, dest="output")
        b.latent_parts.append(split.part_shape)
        shape = split.out_shape(shape)
    slot = "dense" if spec.dense_cond_dim else None
    for _ in range(spec.dense_couplings):
        b.permute(shape[0], "shuffle")
        b.coupling(shape, "affine", "dense", spec.dense_hidden, spec.subnet_depth, spec.clamp,
                   slot, (spec.dense_cond_dim,) if slot else None)
    b.latent_parts.append(shape)
    return FlowModel(b.layers, spec.input_shape, spec.base, store, kind="cs", spec=spec,
                     cond_slots=b.cond_slots, latent_parts=b.latent_parts)


SPECS = {"multiscale": MultiScaleSpec, "iunet": IUNetSpec, "cs": CSSpec}
BUILDERS = {"multiscale": build_multiscale, "iunet": build_iunet, "cs": build_cs_multiscale}


def spec_from_dict(kind, data):
    cls = SPECS[kind]
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise KeyError(f"unknown {kind} spec fields: {sorted(unknown)}")
    data = dict(data)
    if "input_shape" in data:
        data["input_shape"] = tuple(data["input_shape"])
    return cls(**data)


def build_model(kind, spec, store):
    if isinstance(spec, dict):
        spec = spec_from_dict(kind, spec)
    return BUILDERS[kind](spec, store)
