"""Posterior sampling, conditional mean / pixelwise spread, and data-consistency
refinement of samples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine.tensor import Tape, Tensor, no_grad

REFINE_LAMBDAS = (0.0, 0.01, 0.1, 1.0, 10.0)


@dataclass
class PosteriorSummary:
    """N posterior draws with their mean and the 1/N standard deviation."""

    samples: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n: int
    combined: np.ndarray | None = None

    @classmethod
    def from_samples(cls, samples, combined=None):
        samples = np.asarray(samples, dtype=np.float64)
        mean = samples.mean(axis=0)
        std = np.sqrt(np.mean((samples - mean) ** 2, axis=0))
        return cls(samples, mean, std, samples.shape[0], combined)


def _condition_one(cond, y):
    if cond is None:
        return None
    y = np.asarray(y, dtype=np.float64)
    return cond.condition(y[None]).detached()


def draw_samples(model, feats, count, rng, batch_size=256):
    """``count`` draws x = T^-1(z) with z from the base density, float64 (count, *shape)."""
    if count < 1:
        raise ValueError("N must be >= 1")
    out = np.empty((count,) + model.input_shape)
    with no_grad():
        for start in range(0, count, batch_size):
            k = min(batch_size, count - start)
            z = model.base.sample(k, rng).astype(model.store.dtype)
            f = None if feats is None else feats.repeat(k)
            out[start:start + k] = model.inverse(z, f).data
    return out


def posterior_samples(model, cond, y, N, rng, batch_size=256):
    """Sample p(x | y) N times and summarize. ``cond`` None means unconditional."""
    feats = _condition_one(cond, y)
    samples = draw_samples(model, feats, N, rng, batch_size)
    combined = None
    if cond is not None and cond.spec.combine_weight > 0 and feats.recon is not None:
        w = cond.spec.combine_weight
        recon = np.asarray(feats.recon.data, np.float64).reshape(model.input_shape)
        combined = (1 - w) * samples.mean(axis=0) + w * recon
    return PosteriorSummary.from_samples(samples, combined)


@dataclass
class RefineResult:
    initial: np.ndarray
    x: np.ndarray
    trace: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    stopped: str | None = None


def refinement_objective(model, feats, op, y, x, lam):
    """(objective, gradient) of |Ax - y|^2 - lam * log p(x | y) at ``x`` (shape = model input)."""
    x = np.asarray(x, dtype=np.float64)
    img = x.reshape(op.image_shape)
    r = op.forward(img) - y
    data = float(np.sum(r * r))
    grad = 2.0 * op.adjoint(r).reshape(x.shape)
    if lam == 0:
        return data, grad
    leaf = Tensor(x[None].astype(model.store.dtype), requires_grad=True)
    with Tape() as tape:
        lp = model.log_prob(leaf, feats)
    (g_lp,) = tape.backward(lp, wrt=[leaf])
    model.store.zero_grad()
    return data - lam * float(lp.data[0]), grad - lam * g_lp[0].astype(np.float64)


def sample_refine(model, cond, op, y, lam, iterations=100, lr=1e-4, z=None, rng=None,
                  feats=None):
    """Gradient descent on |Ax - y|^2 - lam * log p(x|y) from one posterior draw.

    Conditioning features are computed once and held fixed. Returns the final
    iterate, or the best one so far if the objective becomes non-finite.
    ``trace[k]`` and ``residuals[k]`` belong to iterate k (0 is the draw).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if feats is None:
        feats = _condition_one(cond, y)
    if z is None:
        if rng is None:
            raise ValueError("pass either z or rng")
        z = model.base.sample(1, rng)
    with no_grad():
        x0 = model.inverse(np.asarray(z).reshape(1, -1).astype(model.store.dtype), feats)
    x = np.asarray(x0.data[0], dtype=np.float64)
    result = RefineResult(initial=x.copy(), x=x.copy())
    best, best_x = math.inf, x.copy()
    for it in range(iterations + 1):
        obj, grad = refinement_objective(model, feats, op, y, x, lam)
        if not (math.isfinite(obj) and np.all(np.isfinite(grad))):
            result.stopped = f"non-finite objective at iteration {it}"
            result.x = best_x
            return result
        result.trace.append(obj)
        result.residuals.append(float(np.linalg.norm(op.forward(x.reshape(op.image_shape)) - y)))
        if obj < best:
            best, best_x = obj, x.copy()
        if it < iterations:
            x = x - lr * grad
    result.x = x
    return result


def refine_sweep(model, cond, op, y, lams=REFINE_LAMBDAS, iterations=100, lr=1e-4, z=None,
                 rng=None):
    """Refine the same initial draw for several lambdas; returns {lam: RefineResult}."""
    feats = _condition_one(cond, y)
    if z is None:
        z = model.base.sample(1, rng)
    return {lam: sample_refine(model, cond, op, y, lam, iterations, lr, z=z, feats=feats)
            for lam in lams}
