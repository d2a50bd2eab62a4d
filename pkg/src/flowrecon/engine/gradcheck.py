"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, no_grad


@dataclass
class GradCheckReport:
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e <= self.tol for e in self.errors.values())

    def failures(self):
        return {k: e for k, e in self.errors.items() if e > self.tol}

    def __str__(self):
        lines = [f"{'PASS' if e <= self.tol else 'FAIL'} {k}: rel.err {e:.3e}"
                 for k, e in sorted(self.errors.items())]
        return "\n".join(lines)


def relative_error(analytic, numeric):
    """max |a - n| scaled by the largest gradient magnitude of the slot."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale < 1e-12:
        return diff
    return diff / scale


def _entries(size, max_entries, rng):
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def _scalar(out):
    if isinstance(out, Tensor):
        out = out.data
    return float(np.asarray(out, dtype=np.float64).sum())


def grad_check(f, store, step=1e-6, tol=1e-5, names=None, max_entries=None, seed=0):
    """Compare tape gradients of scalar ``f()`` w.r.t. ``store`` parameters with central differences.

    ``f`` must rebuild its graph from the store on every call and be
    deterministic. ``max_entries`` caps the number of perturbed entries per
    parameter (chosen with a seeded generator).
    """
    names = list(names) if names is not None else [n for n in store.names() if not store.is_frozen(n)]
    store.zero_grad()
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = {n: store.grads[n].copy() for n in names}
    store.zero_grad()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name in names:
        base = store.values[name]
        idx = _entries(base.size, max_entries, rng)
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert.flat[i] += sign * step
                store.values[name] = pert
                with no_grad():
                    vals.append(_scalar(f()))
            numeric[j] = (vals[0] - vals[1]) / (2 * step)
        store.values[name] = base
        report.errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return report


def check_inputs(fn, *arrays, step=1e-6, tol=1e-5, max_entries=None, seed=0):
    """Finite-difference check of ``fn(*tensors)`` w.r.t. each input array."""
    arrays = [np.asarray(a) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    analytic = tape.backward(out, wrt=leaves)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for k, a in enumerate(arrays):
        idx = _entries(a.size, max_entries, rng)
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            vals = []
            for sign in (1.0, -1.0):
                pert = a.copy()
                pert.flat[i] += sign * step
                args = [Tensor(pert) if m == k else Tensor(arrays[m]) for m in range(len(arrays))]
                with no_grad():
                    vals.append(_scalar(fn(*args)))
            numeric[j] = (vals[0] - vals[1]) / (2 * step)
        report.errors[f"input{k}"] = relative_error(analytic[k].reshape(-1)[idx], numeric)
    return report
