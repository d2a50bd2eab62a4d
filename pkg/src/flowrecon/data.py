"""Synthetic datasets: random-ellipse phantoms, convex shapes, stroke "digits"
and analytic 2D Gaussian mixtures.

Image generators are deterministic per seed and return float64 arrays of
shape (count, H, W) with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .engine.params import seeded_rng

_SUPERSAMPLE = 4


def _grid(extent, supersample=_SUPERSAMPLE):
    """Sub-pixel sample coordinates centred on the image, in pixel units."""
    H, W = extent
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    rows = (np.arange(H)[:, None] + off[None, :]).reshape(-1)
    cols = (np.arange(W)[:, None] + off[None, :]).reshape(-1)
    v = (H - 1) / 2.0 - rows[:, None]
    u = cols[None, :] - (W - 1) / 2.0
    return u, v


def _pool(img, extent, supersample=_SUPERSAMPLE):
    H, W = extent
    return img.reshape(H, supersample, W, supersample).mean(axis=(1, 3))


def disk(extent, radius, center=(0.0, 0.0)):
    """Anti-aliased disk (fractional pixel coverage)."""
    u, v = _grid(extent)
    inside = (u - center[0]) ** 2 + (v - center[1]) ** 2 <= radius ** 2
    return _pool(inside.astype(np.float64), extent)


def _ellipse(u, v, cx, cy, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    du, dv = u - cx, v - cy
    x = du * c + dv * s
    y = -du * s + dv * c
    return (x / a) ** 2 + (y / b) ** 2 <= 1.0


def ellipses(count, extent=(64, 64), seed=0):
    """Random ellipse phantoms: a body ellipse with brighter and darker inclusions."""
    H, W = extent
    rng = seeded_rng(int(seed), "ellipses")
    u, v = _grid(extent)
    r = min(H, W) / 2.0
    out = np.empty((count, H, W))
    for n in range(count):
        img = np.zeros_like(u * v)
        a, b = rng.uniform(0.6, 0.9) * r, rng.uniform(0.5, 0.85) * r
        img += rng.uniform(0.4, 0.7) * _ellipse(u, v, 0, 0, a, b, rng.uniform(0, math.pi))
        for _ in range(rng.integers(3, 7)):
            cx, cy = rng.uniform(-0.45, 0.45, size=2) * r
            ea, eb = rng.uniform(0.05, 0.3, size=2) * r
            img += rng.uniform(-0.3, 0.4) * _ellipse(u, v, cx, cy, ea, eb, rng.uniform(0, math.pi))
        out[n] = np.clip(_pool(img, extent), 0.0, 1.0)
    return out


def _convex_polygon(u, v, rng, r):
    k = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
    radius = rng.uniform(0.35, 0.75) * r
    cx, cy = rng.uniform(-0.25, 0.25, size=2) * r
    px = cx + radius * np.cos(angles)
    py = cy + radius * np.sin(angles)
    inside = np.ones(np.broadcast(u, v).shape, dtype=bool)
    for i in range(k):
        x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % k], py[(i + 1) % k]
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    return inside


def shapes(count, extent=(16, 16), seed=0):
    """Random convex polygons, disks and rectangles on an exactly zero background."""
    H, W = extent
    rng = seeded_rng(int(seed), "shapes")
    u, v = _grid(extent)
    r = min(H, W) / 2.0
    out = np.empty((count, H, W))
    for n in range(count):
        kind = rng.integers(3)
        if kind == 0:
            mask = _convex_polygon(u, v, rng, r)
        elif kind == 1:
            cx, cy = rng.uniform(-0.3, 0.3, size=2) * r
            mask = (u - cx) ** 2 + (v - cy) ** 2 <= (rng.uniform(0.3, 0.7) * r) ** 2
        else:
            cx, cy = rng.uniform(-0.3, 0.3, size=2) * r
            hw, hh = rng.uniform(0.2, 0.6, size=2) * r
            mask = (np.abs(u - cx) <= hw) & (np.abs(v - cy) <= hh)
        out[n] = _pool(mask * rng.uniform(0.5, 1.0), extent)
    return out


def _segment_distance(u, v, p0, p1):
    d = p1 - p0
    t = np.clip(((u - p0[0]) * d[0] + (v - p0[1]) * d[1]) / max(float(d @ d), 1e-12), 0.0, 1.0)
    return np.hypot(u - (p0[0] + t * d[0]), v - (p0[1] + t * d[1]))


def digits_like(count, extent=(28, 28), seed=0):
    """Stroke images: a random polyline of 2 to 4 segments with soft edges."""
    H, W = extent
    rng = seeded_rng(int(seed), "digits")
    u, v = _grid(extent, 2)
    r = min(H, W) / 2.0
    out = np.empty((count, H, W))
    for n in range(count):
        pts = rng.uniform(-0.6, 0.6, size=(int(rng.integers(3, 6)), 2)) * r
        width = rng.uniform(0.06, 0.1) * r
        dist = np.full(np.broadcast(u, v).shape, np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(u, v, a, b))
        img = np.clip(1.5 - dist / width, 0.0, 1.0)
        out[n] = _pool(img, extent, 2)
    return out


PHANTOMS = {"ellipses": ellipses, "shapes": shapes, "digits-like": digits_like}


def phantoms(kind, count, extent, seed):
    try:
        gen = PHANTOMS[kind]
    except KeyError:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {sorted(PHANTOMS)}") from None
    return gen(int(count), tuple(extent), seed)


@dataclass(frozen=True)
class GaussianMixture2D:
    weights: tuple
    means: tuple
    covs: tuple

    @classmethod
    def default(cls):
        return cls(weights=(0.3, 0.4, 0.3),
                   means=((-2.0, 0.0), (2.0, 0.0), (0.0, 2.5)),
                   covs=(((0.5, 0.2), (0.2, 0.4)),
                         ((0.3, 0.0), (0.0, 0.6)),
                         ((0.4, -0.15), (-0.15, 0.3))))

    def _arrays(self):
        return (np.asarray(self.weights, float), np.asarray(self.means, float),
                np.asarray(self.covs, float))

    def sample(self, count, rng):
        w, mu, cov = self._arrays()
        comp = rng.choice(len(w), size=count, p=w / w.sum())
        chol = np.linalg.cholesky(cov)
        eps = rng.standard_normal((count, 2))
        return mu[comp] + np.einsum("nij,nj->ni", chol[comp], eps)

    def log_density(self, x):
        w, mu, cov = self._arrays()
        x = np.asarray(x, float)
        terms = []
        for k in range(len(w)):
            d = x - mu[k]
            inv = np.linalg.inv(cov[k])
            quad = np.einsum("...i,ij,...j->...", d, inv, d)
            terms.append(math.log(w[k]) - 0.5 * quad - math.log(2 * math.pi)
                         - 0.5 * math.log(np.linalg.det(cov[k])))
        return logsumexp(np.stack(terms), axis=0)

    def entropy(self, n=801, pad=7.0):
        """Differential entropy -int p ln p by a Riemann sum on a wide grid."""
        _, mu, cov = self._arrays()
        sd = np.sqrt(np.max(np.diagonal(cov, axis1=1, axis2=2)))
        lo, hi = mu.min(axis=0) - pad * sd, mu.max(axis=0) + pad * sd
        xs = np.linspace(lo[0], hi[0], n)
        ys = np.linspace(lo[1], hi[1], n)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        lp = self.log_density(np.stack([gx, gy], axis=-1))
        cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
        return float(-np.sum(np.exp(lp) * lp) * cell)


def gaussian_mixture_2d(count, seed=0, mixture=None):
    mixture = mixture or GaussianMixture2D.default()
    return mixture.sample(int(count), seeded_rng(int(seed), "mixture"))
