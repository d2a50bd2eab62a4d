"""Latent base densities: standard normal and the radial Gaussian.

The radial Gaussian puts a half-normal (sigma = 1) density on the radius and
a uniform density on the direction, so

    ln p(z) = ln(sqrt(2) / (sqrt(pi) * S_n)) - (n - 1) ln|z| - |z|^2 / 2

with S_n = 2 pi^(n/2) / Gamma(n/2) the area of the unit sphere in R^n.
Constant terms are always included so log-likelihoods are comparable across
the two kinds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import ops

KINDS = ("normal", "radial")
LOG_2PI = math.log(2.0 * math.pi)


def log_sphere_area(n):
    """ln S_n, computed through lgamma so it stays finite for image-sized n."""
    return math.log(2.0) + 0.5 * n * math.log(math.pi) - math.lgamma(0.5 * n)


def radial_log_constant(n):
    return 0.5 * math.log(2.0) - 0.5 * math.log(math.pi) - log_sphere_area(n)


def _as_rows(z):
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(1, -1) if z.ndim == 1 else z.reshape(z.shape[0], -1)


def log_density_normal(z):
    """Log-density of N(0, I); ``z`` is one vector or a batch of rows."""
    z = np.asarray(z, dtype=np.float64)
    rows = _as_rows(z)
    n = rows.shape[1]
    out = -0.5 * np.sum(rows * rows, axis=1) - 0.5 * n * LOG_2PI
    return out[0] if z.ndim <= 1 else out


def log_density_radial(z):
    """Radial Gaussian log-density; +inf at the origin when n >= 2 (the density diverges there)."""
    z = np.asarray(z, dtype=np.float64)
    rows = _as_rows(z)
    n = rows.shape[1]
    sq = np.sum(rows * rows, axis=1)
    with np.errstate(divide="ignore"):
        log_r = 0.5 * np.log(sq)
    if n == 1:
        out = radial_log_constant(1) - 0.5 * sq
    else:
        out = radial_log_constant(n) - (n - 1) * log_r - 0.5 * sq
    return out[0] if z.ndim <= 1 else out


@dataclass(frozen=True)
class BaseDistribution:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown base distribution {self.kind!r}; choose from {KINDS}")
        if self.dim < 1:
            raise ValueError("dimension must be positive")

    @property
    def log_constant(self):
        if self.kind == "normal":
            return -0.5 * self.dim * LOG_2PI
        return radial_log_constant(self.dim)

    def log_density(self, z):
        return log_density_normal(z) if self.kind == "normal" else log_density_radial(z)

    def log_prob(self, z):
        """Differentiable per-row log-density of a (B, ...) tensor."""
        flat = ops.flatten(z) if z.ndim > 2 else z
        sq = ops.sum(ops.square(flat), axis=1)
        const = np.asarray(self.log_constant, dtype=flat.dtype)
        out = ops.sub(const, ops.mul(sq, 0.5))
        if self.kind == "radial" and self.dim > 1:
            out = ops.sub(out, ops.mul(ops.log(sq), 0.5 * (self.dim - 1)))
        return out

    def sample(self, count, rng):
        return sample(self, count, rng)


def sample(dist, count, rng):
    """``count`` i.i.d. draws as a (count, n) float64 array."""
    if count < 1:
        raise ValueError("count must be >= 1")
    g = rng.standard_normal((count, dist.dim))
    if dist.kind == "normal":
        return g
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    radius = np.abs(rng.standard_normal((count, 1)))
    return g / norms * radius
