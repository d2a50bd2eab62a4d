"""Measurement models: Gaussian compressed sensing, parallel-beam Radon and
masked Fourier sampling, with adjoints, approximate inverses and noise models.

Every operator maps images with trailing shape ``image_shape`` to
measurements with trailing shape ``meas_shape``; any leading axes are
treated as a batch. All computations run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .engine.params import seeded_rng


class ConvergenceError(RuntimeError):
    def __init__(self, solver, iterations, residual):
        super().__init__(f"{solver} did not converge after {iterations} iterations "
                         f"(relative residual {residual:.3e})")
        self.solver = solver
        self.iterations = iterations
        self.residual = residual


class OperatorMismatch(ValueError):
    pass


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return seeded_rng(int(seed), "noise")


def conjugate_gradient(apply, b, tol=1e-8, maxiter=500, x0=None, name="cg"):
    """Solve ``apply(x) = b`` row by row for a symmetric positive (semi)definite map.

    ``b`` has shape (B, N); each row has its own step sizes. Converged when
    every row satisfies |r| <= tol * |b|. Raises :class:`ConvergenceError`.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = np.sum(r * r, axis=1)
    bnorm = np.sqrt(np.sum(b * b, axis=1))
    target = tol * np.where(bnorm > 0, bnorm, 1.0)
    for it in range(maxiter + 1):
        res = np.sqrt(rs)
        if np.all(res <= target):
            return x
        if it == maxiter:
            break
        Ap = apply(p)
        pAp = np.sum(p * Ap, axis=1)
        active = res > target
        alpha = np.where(active & (pAp > 0), rs / np.where(pAp > 0, pAp, 1.0), 0.0)
        x = x + alpha[:, None] * p
        r = r - alpha[:, None] * Ap
        rs_new = np.sum(r * r, axis=1)
        beta = np.where(active & (rs > 0), rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = r + beta[:, None] * p
        rs = rs_new
    worst = float(np.max(np.sqrt(rs) / np.where(bnorm > 0, bnorm, 1.0)))
    raise ConvergenceError(name, maxiter, worst)


def gradient(x, ndim):
    """Forward differences along the last ``ndim`` axes, replicate boundary.

    Returns an array with a new leading component axis at position -ndim-1.
    """
    parts = []
    for k in range(1, ndim + 1):
        ax = x.ndim - k
        d = np.diff(x, axis=ax, append=np.take(x, [-1], axis=ax))
        parts.append(d)
    return np.stack(parts[::-1], axis=x.ndim - ndim)


def gradient_adjoint(g, ndim):
    """Adjoint of :func:`gradient` (negative divergence)."""
    comp_axis = g.ndim - ndim - 1
    out = 0.0
    for k in range(ndim):
        d = np.take(g, k, axis=comp_axis)
        ax = d.ndim - ndim + k
        n = d.shape[ax]
        d = np.moveaxis(d, ax, -1)
        res = np.zeros_like(d)
        # forward difference with replicate boundary: (Dx)_i = x_{i+1} - x_i for i < n-1, 0 at n-1
        res[..., : n - 1] -= d[..., : n - 1]
        res[..., 1:] += d[..., : n - 1]
        out = out + np.moveaxis(res, -1, ax)
    return out


class MeasurementModel:
    kind = "abstract"
    image_shape: tuple
    meas_shape: tuple

    def _split(self, x, trailing, what):
        x = np.asarray(x, dtype=np.float64)
        k = len(trailing)
        if x.shape[x.ndim - k:] != tuple(trailing) or x.ndim < k:
            raise OperatorMismatch(f"{self.kind} {what}: expected trailing shape {trailing}, "
                                   f"got {x.shape}")
        lead = x.shape[: x.ndim - k]
        return x.reshape((-1,) + tuple(trailing)), lead

    def forward(self, x):
        xb, lead = self._split(x, self.image_shape, "forward")
        return self._forward(xb).reshape(lead + self.meas_shape)

    def adjoint(self, y):
        yb, lead = self._split(y, self.meas_shape, "adjoint")
        return self._adjoint(yb).reshape(lead + self.image_shape)

    __call__ = forward

    def normal(self, x):
        return self.adjoint(self.forward(x))

    def approx_inverse(self, y):
        raise NotImplementedError

    def spec(self):
        raise NotImplementedError

    def tv_inverse(self, y, lam=0.02, tol=1e-6, maxiter=1000):
        return tv_inverse(self, y, lam, tol, maxiter)


class MatrixOperator(MeasurementModel):
    """Dense matrix acting on flattened images."""

    kind = "matrix"

    def __init__(self, matrix, image_shape=None, seed=None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        m, n = self.matrix.shape
        self.m, self.n = m, n
        self.image_shape = tuple(image_shape) if image_shape is not None else (n,)
        if int(np.prod(self.image_shape)) != n:
            raise OperatorMismatch(f"image shape {self.image_shape} does not have {n} entries")
        self.meas_shape = (m,)
        self.seed = seed

    def _forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.matrix.T

    def _adjoint(self, y):
        return (y @ self.matrix).reshape((-1,) + self.image_shape)

    def pseudo_inverse(self, y, tol=1e-8, maxiter=500):
        return pseudo_inverse(self, y, tol, maxiter)

    def approx_inverse(self, y):
        return self.pseudo_inverse(y)

    def spec(self):
        return {"kind": "gaussian", "m": self.m, "n": self.n, "seed": self.seed,
                "image_shape": list(self.image_shape)}


def gaussian_matrix(m, n, seed, image_shape=None):
    """m x n matrix with i.i.d. N(0, 1/m) entries drawn from a seeded stream."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    rng = seeded_rng(int(seed), "gaussian-matrix")
    mat = rng.standard_normal((m, n)) / math.sqrt(m)
    op = MatrixOperator(mat, image_shape, seed=int(seed))
    op.kind = "gaussian"
    return op


def pseudo_inverse(op, y, tol=1e-8, maxiter=500):
    """Minimum-norm least-squares solution by CG on the normal equations.

    For m < n the system A A^T w = y is solved and x = A^T w (the minimum-norm
    solution); otherwise A^T A x = A^T y.
    """
    if not isinstance(op, MatrixOperator):
        raise OperatorMismatch("pseudo_inverse needs a matrix operator")
    yb, lead = op._split(y, op.meas_shape, "pseudo_inverse")
    A = op.matrix
    if op.m < op.n:
        w = conjugate_gradient(lambda v: v @ A @ A.T, yb, tol, maxiter, name="pseudo_inverse")
        x = w @ A
    else:
        x = conjugate_gradient(lambda v: v @ A.T @ A, yb @ A, tol, maxiter, name="pseudo_inverse")
    return x.reshape(lead + op.image_shape)


def tv_inverse(op, y, lam=0.02, tol=1e-6, maxiter=1000):
    """Solve (A^T A + lam grad^T grad) x = A^T y with CG."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    yb, lead = op._split(y, op.meas_shape, "tv_inverse")
    shape = op.image_shape
    nd = len(shape)

    def apply(v):
        img = v.reshape((-1,) + shape)
        out = op._adjoint(op._forward(img)) + lam * gradient_adjoint(gradient(img, nd), nd)
        return out.reshape(v.shape[0], -1)

    rhs = op._adjoint(yb).reshape(yb.shape[0], -1)
    x = conjugate_gradient(apply, rhs, tol, maxiter, name="tv_inverse")
    return x.reshape(lead + shape)


class RadonOperator(MeasurementModel):
    """Parallel-beam Radon transform on an H x W pixel grid (unit pixels).

    Angles are k*pi/A for k < A. Detector bins have unit spacing centred on
    the rotation axis; rays are sampled every ``step`` pixels with bilinear
    interpolation over the image diagonal. The sinogram has shape (A, D).
    """

    kind = "radon"

    def __init__(self, image_shape, n_angles, n_detectors=None, step=0.5):
        H, W = image_shape
        self.image_shape = (int(H), int(W))
        diag = math.hypot(H, W)
        if n_detectors is None:
            n_detectors = int(math.ceil(diag)) | 1
        self.n_angles, self.n_detectors, self.step = int(n_angles), int(n_detectors), float(step)
        self.meas_shape = (self.n_angles, self.n_detectors)
        self.angles = np.arange(self.n_angles) * (math.pi / self.n_angles)
        self.cos = np.cos(self.angles)
        self.sin = np.sin(self.angles)
        self.det = np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0
        half = diag / 2.0
        n_t = int(math.ceil(half / self.step))
        self.ts = np.arange(-n_t, n_t + 1) * self.step
        self._npad, self._filter = _ramlak_response(self.n_detectors)

    def _forward(self, x):
        return _kernels.radon_project(np.ascontiguousarray(x), self.cos, self.sin, self.det,
                                      self.ts, self.step)

    def _adjoint(self, y):
        H, W = self.image_shape
        return _kernels.radon_backproject(np.ascontiguousarray(y), self.cos, self.sin, self.det,
                                          self.ts, self.step, H, W)

    def filter_sinogram(self, sino):
        D = self.n_detectors
        n = self._npad
        spec = np.fft.rfft(sino, n=n, axis=-1) * self._filter
        return np.fft.irfft(spec, n=n, axis=-1)[..., :D]

    def fbp(self, sino):
        """Ramp-filtered back-projection (Ram-Lak)."""
        sb, lead = self._split(sino, self.meas_shape, "fbp")
        filt = np.ascontiguousarray(self.filter_sinogram(sb))
        H, W = self.image_shape
        img = _kernels.fbp_backproject(filt, self.cos, self.sin, float(self.det[0]), 1.0, H, W)
        return (img * (math.pi / self.n_angles)).reshape(lead + self.image_shape)

    def approx_inverse(self, y):
        return self.fbp(y)

    def spec(self):
        return {"kind": "radon", "image_shape": list(self.image_shape),
                "n_angles": self.n_angles, "n_detectors": self.n_detectors, "step": self.step}


def _ramlak_response(n_det):
    """Frequency response of the band-limited ramp on zero-padded detector rows.

    Uses the spatial Ram-Lak kernel (1/4 at 0, -1/(pi k)^2 at odd k) so the
    discrete response matches |f| without a DC offset; rows are padded to
    the next power of two that is at least twice the detector count.
    """
    n = 1 << int(math.ceil(math.log2(max(2 * n_det, 2))))
    k = np.concatenate([np.arange(0, n // 2 + 1), np.arange(-n // 2 + 1, 0)])
    h = np.zeros(n)
    h[0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (math.pi * k[odd]) ** 2
    return n, np.real(np.fft.rfft(h))


def fbp(op, sino):
    if not isinstance(op, RadonOperator):
        raise OperatorMismatch("fbp needs a Radon operator")
    return op.fbp(sino)


@dataclass(frozen=True)
class SamplingMask:
    mask: np.ndarray
    center_fraction: float
    acceleration: float
    seed: int

    @property
    def columns(self):
        return np.flatnonzero(self.mask)

    def to_text(self):
        return "".join("1" if m else "0" for m in self.mask)

    @classmethod
    def from_text(cls, text, center_fraction=0.08, acceleration=4, seed=0):
        return cls(np.array([c == "1" for c in text.strip()]), center_fraction, acceleration, seed)


def make_mask(width, center_fraction=0.08, acceleration=4, seed=0):
    """Column mask: a centred low-frequency block plus uniformly random extra columns."""
    if width < 4:
        raise ValueError("mask width must be >= 4")
    n_center = int(math.floor(center_fraction * width + 1e-9))
    budget = int(math.floor(width / acceleration + 1e-9))
    if n_center > budget:
        raise ValueError(f"centre block of {n_center} columns exceeds the budget of {budget}")
    mask = np.zeros(width, dtype=bool)
    start = width // 2 - n_center // 2
    mask[start:start + n_center] = True
    rest = np.flatnonzero(~mask)
    rng = seeded_rng(int(seed), "mask")
    mask[rng.choice(rest, size=budget - n_center, replace=False)] = True
    return SamplingMask(mask, center_fraction, acceleration, int(seed))


class FourierOperator(MeasurementModel):
    """Unitary 2D FFT (centred) restricted to the selected k-space columns.

    Measurements are real with shape (2, H, k): real and imaginary parts of
    the selected columns.
    """

    kind = "fourier"

    def __init__(self, mask, image_shape):
        self.mask = mask if isinstance(mask, SamplingMask) else SamplingMask(
            np.asarray(mask, bool), 0.0, 1.0, 0)
        H, W = image_shape
        if self.mask.mask.shape[0] != W:
            raise OperatorMismatch("mask width does not match the image width")
        self.image_shape = (int(H), int(W))
        self.cols = self.mask.columns
        self.meas_shape = (2, int(H), len(self.cols))

    def _kspace(self, x):
        return np.fft.fftshift(np.fft.fft2(x, norm="ortho"), axes=(-2, -1))

    def _fill(self, y):
        H, W = self.image_shape
        full = np.zeros((y.shape[0], H, W), dtype=np.complex128)
        full[:, :, self.cols] = y[:, 0] + 1j * y[:, 1]
        return np.fft.ifft2(np.fft.ifftshift(full, axes=(-2, -1)), norm="ortho")

    def _forward(self, x):
        k = self._kspace(x)[:, :, self.cols]
        return np.stack([k.real, k.imag], axis=1)

    def _adjoint(self, y):
        return self._fill(y).real

    def zero_filled(self, y):
        yb, lead = self._split(y, self.meas_shape, "zero_filled_ifft")
        return np.abs(self._fill(yb)).reshape(lead + self.image_shape)

    def approx_inverse(self, y):
        return self.zero_filled(y)

    def spec(self):
        return {"kind": "fourier", "image_shape": list(self.image_shape),
                "mask": self.mask.to_text(), "center_fraction": self.mask.center_fraction,
                "acceleration": self.mask.acceleration, "seed": self.mask.seed}


def zero_filled_ifft(y, op):
    return op.zero_filled(y)


def add_relative_gaussian_noise(y, level, seed, batched=False, per_component=False):
    """y + eps with eps ~ N(0, sigma^2), sigma = level * |y| / sqrt(m).

    With ``batched`` the norm is taken per leading-axis entry. With
    ``per_component`` each entry instead gets sigma_i = level * |y_i|.
    """
    if level < 0:
        raise ValueError("noise level must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if level == 0:
        return y.copy()
    rng = _rng(seed)
    noise = rng.standard_normal(y.shape)
    if per_component:
        return y + level * np.abs(y) * noise
    if batched:
        rows = y.reshape(y.shape[0], -1)
        sigma = level * np.linalg.norm(rows, axis=1) / math.sqrt(rows.shape[1])
        return y + sigma.reshape((-1,) + (1,) * (y.ndim - 1)) * noise
    sigma = level * np.linalg.norm(y) / math.sqrt(y.size)
    return y + sigma * noise


def poisson_lowdose_noise(sino, photon_count=4096, seed=0):
    """Per bin: k ~ Poisson(N0 exp(-p)), returns -ln(max(k, 1) / N0)."""
    sino = np.asarray(sino, dtype=np.float64)
    if photon_count < 1:
        raise ValueError("photon count must be >= 1")
    if np.any(sino < 0):
        raise ValueError("sinogram values must be non-negative")
    rng = _rng(seed)
    k = rng.poisson(photon_count * np.exp(-sino))
    return -np.log(np.maximum(k, 1) / photon_count)


def make_operator(spec):
    """Rebuild an operator from the dict produced by ``op.spec()``."""
    kind = spec["kind"]
    if kind == "gaussian":
        return gaussian_matrix(spec["m"], spec["n"], spec["seed"], spec.get("image_shape"))
    if kind == "radon":
        return RadonOperator(spec["image_shape"], spec["n_angles"], spec.get("n_detectors"),
                             spec.get("step", 0.5))
    if kind == "fourier":
        mask = SamplingMask.from_text(spec["mask"], spec.get("center_fraction", 0.08),
                                      spec.get("acceleration", 4), spec.get("seed", 0))
        return FourierOperator(mask, spec["image_shape"])
    raise ValueError(f"unknown operator kind {kind!r}")
