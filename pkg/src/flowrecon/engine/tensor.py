"""Eager tensors and an explicit single-use tape for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = [np.dtype(np.float32)]
_CHECK_FINITE = [False]


class ShapeError(ValueError):
    """Raised when a primitive receives operands with incompatible extents."""

    def __init__(self, primitive, *extents, detail=""):
        self.primitive = primitive
        self.extents = extents
        msg = f"{primitive}: incompatible extents {', '.join(str(tuple(e)) for e in extents)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeConsumedError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """A primitive or layer produced NaN/Inf."""

    def __init__(self, where, index=None):
        self.where = where
        self.index = index
        super().__init__(f"non-finite values produced by {where}"
                         + (f" (layer {index})" if index is not None else ""))


def default_dtype():
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype):
    _DEFAULT_DTYPE[0] = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. float64 for verification)."""
    old = _DEFAULT_DTYPE[0]
    _DEFAULT_DTYPE[0] = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = old


@contextlib.contextmanager
def check_finite(enabled=True):
    """Checked mode: every primitive raises NonFiniteError on NaN/Inf output."""
    old = _CHECK_FINITE[0]
    _CHECK_FINITE[0] = enabled
    try:
        yield
    finally:
        _CHECK_FINITE[0] = old


def finite_checks_enabled():
    return _CHECK_FINITE[0]


class Tensor:
    """Dense real array plus autodiff bookkeeping.

    ``data`` is never modified after construction. ``param`` is set on leaves
    handed out by a :class:`ParameterStore` so gradients flow back into it.
    """

    __slots__ = ("data", "requires_grad", "param", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, param=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; all routed through the primitive registry
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __radd__(self, other):
        from .ops import add
        return add(other, self)

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    def __rmul__(self, other):
        from .ops import mul
        return mul(other, self)

    def __neg__(self):
        from .ops import neg
        return neg(self)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = default_dtype()
    return Tensor(x, dtype=dtype)


class TapeNode:
    __slots__ = ("op", "inputs", "outputs", "backward")

    def __init__(self, op, inputs, outputs, backward):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward

    def __repr__(self):
        return f"TapeNode({self.op}, in={len(self.inputs)}, out={len(self.outputs)})"


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tape:
    """Records primitive applications in execution order.

    Usage::

        with Tape() as tape:
            loss = build_graph()
        grads = tape.backward(loss, wrt=[x])

    A tape can be differentiated once; its nodes are released afterwards.
    """

    def __init__(self):
        self.nodes = []
        self._leaves = {}
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeConsumedError("cannot record on a consumed tape")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self):
        return 0 if self.nodes is None else len(self.nodes)

    def add_node(self, op, inputs, outputs, backward):
        if self.consumed:
            raise TapeConsumedError("cannot record on a consumed tape")
        produced = self._produced
        for t in inputs:
            if t.requires_grad and id(t) not in produced:
                self._leaves[id(t)] = t
        for t in outputs:
            produced.add(id(t))
        node = TapeNode(op, inputs, outputs, backward)
        self.nodes.append(node)
        return node

    @property
    def _produced(self):
        p = getattr(self, "_produced_ids", None)
        if p is None:
            p = self._produced_ids = set()
        return p

    def backward(self, output, seed=None, wrt=()):
        """Propagate ``seed`` (default: ones) from ``output`` back through the tape.

        Parameter leaves accumulate into their store. Returns a list of
        gradients, one per tensor in ``wrt`` (zeros if unreachable).
        """
        if self.consumed:
            raise TapeConsumedError("tape already consumed by a previous backward")
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ShapeError("backward", seed.shape, output.shape, detail="seed must match output")
        grads = {id(output): seed}
        for node in reversed(self.nodes):
            gouts = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in gouts):
                continue
            if len(node.outputs) == 1:
                gins = node.backward(gouts[0])
            else:
                gouts = [np.zeros_like(o.data) if g is None else g
                         for g, o in zip(gouts, node.outputs)]
                gins = node.backward(gouts)
            for inp, g in zip(node.inputs, gins):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        for key, leaf in self._leaves.items():
            if leaf.param is not None and key in grads:
                store, name = leaf.param
                store.accumulate(name, grads[key])
        result = [grads.get(id(t), np.zeros_like(t.data)) if t.requires_grad
                  else np.zeros_like(t.data) for t in wrt]
        self.nodes = None
        self._leaves = {}
        self._produced_ids = None
        self.consumed = True
        return result
