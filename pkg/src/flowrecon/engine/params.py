"""Named parameter slots with gradient accumulators and optimizer buffers."""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, default_dtype


def seeded_rng(*keys):
    """Counter-based (Philox) generator keyed by integers and/or strings."""
    words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


class ParameterStore:
    """Owns every trainable array of a model.

    Values are replaced, never mutated in place, so tensors handed out by
    ``store[name]`` stay valid for the tape that captured them.
    """

    def __init__(self, seed=0, dtype=None):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype or default_dtype())
        self.values = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step = 0
        self._frozen = set()

    def add(self, name, shape, init="he", fan_in=None, scale=1.0):
        if name in self.values:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape, dtype=self.dtype)
        elif init == "he":
            fan_in = fan_in or int(np.prod(shape[1:])) or 1
            rng = seeded_rng(self.seed, name)
            value = (rng.standard_normal(shape) * (scale * np.sqrt(2.0 / fan_in))).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.values[name] = value
        self.grads[name] = np.zeros(shape, dtype=self.dtype)
        self.m[name] = np.zeros(shape, dtype=self.dtype)
        self.v[name] = np.zeros(shape, dtype=self.dtype)
        return name

    def __getitem__(self, name):
        return Tensor(self.values[name], requires_grad=not self.is_frozen(name),
                      param=(self, name))

    def __contains__(self, name):
        return name in self.values

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def names(self, prefix=""):
        return [n for n in self.values if n.startswith(prefix)]

    def count(self, prefix=""):
        return int(sum(self.values[n].size for n in self.names(prefix)))

    def set(self, name, value):
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.values[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self.values[name].shape}")
        self.values[name] = value.copy()

    def freeze(self, prefix):
        self._frozen.add(prefix)

    def unfreeze(self, prefix):
        self._frozen.discard(prefix)

    def is_frozen(self, name):
        return any(name.startswith(p) for p in self._frozen)

    def accumulate(self, name, grad):
        if grad.shape != self.grads[name].shape:
            raise ValueError(f"{name}: gradient shape {grad.shape} != {self.grads[name].shape}")
        self.grads[name] = self.grads[name] + grad.astype(self.dtype, copy=False)

    def zero_grad(self):
        for name, g in self.grads.items():
            self.grads[name] = np.zeros_like(g)

    def snapshot(self):
        return {n: v.copy() for n, v in self.values.items()}

    def restore(self, values):
        for n, v in values.items():
            self.set(n, v)

    def state(self):
        """Everything needed to resume optimisation bit-for-bit."""
        out = {f"param/{n}": v for n, v in self.values.items()}
        out.update({f"adam_m/{n}": v for n, v in self.m.items()})
        out.update({f"adam_v/{n}": v for n, v in self.v.items()})
        out["adam_step"] = np.array([self.step], dtype=np.int64)
        return out

    def load_state(self, state, strict=True):
        for key, arr in state.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                target = self.values
            elif kind == "adam_m":
                target = self.m
            elif kind == "adam_v":
                target = self.v
            elif key == "adam_step":
                self.step = int(np.asarray(arr).reshape(-1)[0])
                continue
            else:
                raise KeyError(f"unexpected entry {key!r}")
            if name not in target:
                if strict:
                    raise KeyError(f"checkpoint has unknown parameter {name!r}")
                continue
            if tuple(arr.shape) != target[name].shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {target[name].shape}")
            target[name] = np.array(arr, dtype=self.dtype)
        if strict:
            missing = [n for n in self.values if f"param/{n}" not in state]
            if missing:
                raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
