"""Conditioning networks.

A conditioner first applies a fixed, non-trainable approximate inverse of
the measurement operator (pseudo-inverse, TV solve, FBP or zero-filled
inverse FFT) and then a trainable trunk that produces one feature tensor
per flow scale. Level ``i`` has spatial extent ``E / 2**i``.

Trunks:

* ``avgpool``: one convolution, then repeated 2x2 average pooling.
* ``cnn``: two convolutions per level, average pooling between levels.
* ``resnet``: residual blocks, strided convolutions between levels.
* ``unet``: encoder/decoder with skips. The decoder (expanding) levels are
  the main features, the encoder levels are exposed separately and a 1x1
  head on the finest decoder level adds a correction to the inversion,
  giving an image-domain reconstruction.
* ``mlp``: dense layers for vector-valued problems (no image levels).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .architectures import Features
from .engine import ops
from .engine.tensor import Tensor, as_tensor
from .operators import MatrixOperator, OperatorMismatch, RadonOperator, FourierOperator

TRUNKS = ("avgpool", "cnn", "resnet", "unet", "mlp")
INVERSIONS = ("pinv", "tv", "fbp", "zero_filled", "adjoint", "identity")


@dataclass
class ConditionerSpec:
    trunk: str = "avgpool"
    inversion: str = "pinv"
    levels: int = 2
    channels: int = 32
    width: int = 32
    dense_dim: int = 0
    hidden: int = 64
    tv_lambda: float = 0.02
    trainable: bool = True
    combine_weight: float = 0.0


def default_inversion(op):
    if isinstance(op, MatrixOperator):
        return "pinv"
    if isinstance(op, RadonOperator):
        return "fbp"
    if isinstance(op, FourierOperator):
        return "zero_filled"
    return "adjoint"


class Conditioner:
    def __init__(self, op, spec: ConditionerSpec, store, prefix="cond", image_shape=None):
        if spec.trunk not in TRUNKS:
            raise ValueError(f"unknown trunk {spec.trunk!r}; choose from {TRUNKS}")
        if spec.inversion not in INVERSIONS:
            raise ValueError(f"unknown inversion {spec.inversion!r}; choose from {INVERSIONS}")
        self.op = op
        self.spec = spec
        self.store = store
        self.prefix = prefix
        self.image_shape = tuple(image_shape or op.image_shape)
        self.vector = spec.trunk == "mlp"
        if not self.vector:
            if len(self.image_shape) != 2:
                raise ValueError("image trunks need a 2D image shape")
            H, W = self.image_shape
            if H % 2 ** (spec.levels - 1) or W % 2 ** (spec.levels - 1):
                raise ValueError(f"image extents must be divisible by {2 ** (spec.levels - 1)}")
        self._build()
        if not spec.trainable:
            store.freeze(prefix + ".")

    # ------------------------------------------------------------------ parameters

    def _conv(self, name, cin, cout, k=3, zero=False):
        self.store.add(f"{self.prefix}.{name}.w", (cout, cin, k, k),
                       init="zeros" if zero else "he", fan_in=cin * k * k)
        self.store.add(f"{self.prefix}.{name}.b", (cout,), init="zeros")

    def _dense(self, name, din, dout):
        self.store.add(f"{self.prefix}.{name}.w", (din, dout), init="he", fan_in=din)
        self.store.add(f"{self.prefix}.{name}.b", (dout,), init="zeros")

    def _apply_conv(self, name, x, stride=1, act=True):
        s = self.store
        x = ops.bias_add(ops.conv2d(x, s[f"{self.prefix}.{name}.w"], stride),
                         s[f"{self.prefix}.{name}.b"])
        return ops.leaky_relu(x) if act else x

    def _apply_dense(self, name, x, act=True):
        s = self.store
        x = ops.bias_add(ops.matmul(x, s[f"{self.prefix}.{name}.w"]), s[f"{self.prefix}.{name}.b"])
        return ops.leaky_relu(x) if act else x

    def _build(self):
        sp = self.spec
        L, w, c = sp.levels, sp.width, sp.channels
        if self.vector:
            din = int(np.prod(self.image_shape))
            self._dense("mlp0", din, sp.hidden)
            self._dense("mlp1", sp.hidden, sp.hidden)
            self._dense("mlp2", sp.hidden, sp.dense_dim or sp.hidden)
            return
        t = sp.trunk
        if t == "avgpool":
            self._conv("stem", 1, w)
        elif t == "cnn":
            for i in range(L):
                self._conv(f"l{i}a", 1 if i == 0 else w, w)
                self._conv(f"l{i}b", w, w)
        elif t == "resnet":
            self._conv("stem", 1, w)
            for i in range(L):
                if i:
                    self._conv(f"down{i}", w, w)
                self._conv(f"res{i}a", w, w)
                self._conv(f"res{i}b", w, w)
        elif t == "unet":
            self._conv("enc0", 1, w)
            for i in range(1, L):
                self._conv(f"enc{i}", w, w)
            for i in range(L - 1):
                self._conv(f"dec{i}", 2 * w, w)
            self._conv("head", w, 1, k=1, zero=True)
        if c != w:
            for i in range(L):
                self._conv(f"proj{i}", w, c, k=1)
                if t == "unet":
                    self._conv(f"eproj{i}", w, c, k=1)
        if sp.dense_dim:
            H, W = self.image_shape
            n = w * (H // 2 ** (L - 1)) * (W // 2 ** (L - 1))
            self._dense("dense", n, sp.dense_dim)

    # ------------------------------------------------------------------ inversion

    def invert(self, y):
        """Fixed approximate inverse A^dagger y as a float64 array (no gradient)."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape[1:] != tuple(self.op.meas_shape):
            raise OperatorMismatch(f"measurement shape {y.shape[1:]} does not match "
                                   f"the operator ({tuple(self.op.meas_shape)})")
        kind = self.spec.inversion
        if kind == "pinv":
            out = self.op.pseudo_inverse(y)
        elif kind == "tv":
            out = self.op.tv_inverse(y, self.spec.tv_lambda)
        elif kind == "fbp":
            out = self.op.fbp(y)
        elif kind == "zero_filled":
            out = self.op.zero_filled(y)
        elif kind == "adjoint":
            out = self.op.adjoint(y)
        else:
            out = y
        return out.reshape((y.shape[0],) + self.image_shape)

    # ------------------------------------------------------------------ trunk

    def condition(self, y):
        return self.features(self.invert(y))

    __call__ = condition

    def features(self, xinv):
        """Run the trunk on precomputed inversions of shape (B, *image_shape)."""
        xinv = np.asarray(xinv)
        if xinv.shape[1:] != self.image_shape:
            raise OperatorMismatch(f"inversion shape {xinv.shape[1:]} != {self.image_shape}")
        sp = self.spec
        if self.vector:
            h = as_tensor(xinv.reshape(xinv.shape[0], -1), dtype=self.store.dtype)
            h = self._apply_dense("mlp0", h)
            h = self._apply_dense("mlp1", h)
            return Features([], dense=self._apply_dense("mlp2", h, act=False))
        x = as_tensor(xinv[:, None], dtype=self.store.dtype)
        L, t = sp.levels, sp.trunk
        encoder = None
        recon = None
        if t == "avgpool":
            levels = [self._apply_conv("stem", x)]
            for _ in range(1, L):
                levels.append(ops.avgpool2(levels[-1]))
        elif t == "cnn":
            levels, h = [], x
            for i in range(L):
                if i:
                    h = ops.avgpool2(h)
                h = self._apply_conv(f"l{i}b", self._apply_conv(f"l{i}a", h))
                levels.append(h)
        elif t == "resnet":
            levels, h = [], self._apply_conv("stem", x)
            for i in range(L):
                if i:
                    h = self._apply_conv(f"down{i}", h, stride=2)
                r = self._apply_conv(f"res{i}b", self._apply_conv(f"res{i}a", h), act=False)
                h = ops.leaky_relu(ops.add(h, r))
                levels.append(h)
        else:
            enc = [self._apply_conv("enc0", x)]
            for i in range(1, L):
                enc.append(self._apply_conv(f"enc{i}", enc[-1], stride=2))
            dec = [None] * L
            dec[L - 1] = enc[L - 1]
            for i in range(L - 2, -1, -1):
                up = ops.upsample2(dec[i + 1])
                dec[i] = self._apply_conv(f"dec{i}", ops.concat([up, enc[i]], axis=1))
            levels, encoder = dec, enc
            head = self._apply_conv("head", dec[0], act=False)
            recon = ops.add(ops.reshape(head, (xinv.shape[0],) + self.image_shape),
                            Tensor(xinv.astype(head.dtype)))
        dense = None
        if sp.dense_dim:
            dense = self._apply_dense("dense", ops.flatten(levels[-1]))
        if sp.channels != sp.width:
            levels = [self._apply_conv(f"proj{i}", f) for i, f in enumerate(levels)]
            if encoder is not None:
                encoder = [self._apply_conv(f"eproj{i}", f) for i, f in enumerate(encoder)]
        return Features(levels, encoder=encoder, dense=dense, recon=recon)

    def reconstruction(self, y=None, features=None):
        """Image-domain output of the UNet trunk."""
        if self.spec.trunk != "unet":
            raise ValueError("only the unet trunk produces a reconstruction")
        feats = features if features is not None else self.condition(y)
        return feats.recon

    def manifest(self):
        return {"spec": asdict(self.spec), "prefix": self.prefix,
                "image_shape": list(self.image_shape), "operator": self.op.spec()}


def conditioner_for_model(model, op, store, trunk="avgpool", inversion=None, width=None,
                          hidden=64, tv_lambda=0.02, trainable=True, prefix="cond"):
    """Conditioner whose level count, channel width and dense size match the
    conditioning slots of ``model``."""
    slots = model.cond_slots
    levels = [int(k.split(":")[1]) for k in slots if k.startswith(("main", "enc"))]
    chans = {v[0] for k, v in slots.items() if k != "dense"}
    if len(chans) > 1:
        raise ValueError("all image slots must share one channel count")
    channels = chans.pop() if chans else 0
    dense_dim = slots["dense"][0] if "dense" in slots else 0
    if len(model.input_shape) == 1:
        trunk = "mlp"
    image_shape = model.input_shape[1:] if len(model.input_shape) == 3 else model.input_shape
    spec = ConditionerSpec(trunk=trunk, inversion=inversion or default_inversion(op),
                           levels=(max(levels) + 1) if levels else 1,
                           channels=channels or (width or 32), width=width or channels or 32,
                           dense_dim=dense_dim, hidden=hidden, tv_lambda=tv_lambda,
                           trainable=trainable)
    return Conditioner(op, spec, store, prefix=prefix, image_shape=image_shape)


def mean_nll(model, x, feats):
    """Mean over the batch of -log p(x | y)."""
    return ops.neg(ops.mean(model.log_prob(x, feats)))


def conditional_loss(model, cond, x, y=None, alpha=1.0, feats=None):
    """-log p(x|y) averaged over the batch, plus alpha * MSE(H(y), x) when alpha > 0."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha > 0 and cond.spec.trunk != "unet":
        raise ValueError("the conditional loss needs the unet trunk for alpha > 0")
    if feats is None:
        feats = cond.condition(y)
    x = as_tensor(x, dtype=None if isinstance(x, Tensor) else model.store.dtype)
    loss = mean_nll(model, x, feats)
    if alpha > 0:
        target = ops.reshape(x, (x.shape[0],) + cond.image_shape)
        diff = ops.sub(feats.recon, target)
        loss = ops.add(loss, ops.mul(ops.mean(ops.square(diff)), alpha))
    return loss
