"""Pure NumPy versions of the compiled kernels (same signatures, same results)."""

import numpy as np


def _out_extent(n, k, stride):
    pad = k // 2
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride):
    B, C, H, W = x.shape
    pad = k // 2
    Ho, Wo = _out_extent(H, k, stride), _out_extent(W, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky, kx] = xp[:, :, ky:ky + stride * (Ho - 1) + 1:stride,
                                   kx:kx + stride * (Wo - 1) + 1:stride]
    return out.reshape(B, C * k * k, Ho * Wo)


def col2im(cols, shape, k, stride):
    B, C, H, W = shape
    pad = k // 2
    Ho, Wo = _out_extent(H, k, stride), _out_extent(W, k, stride)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky:ky + stride * (Ho - 1) + 1:stride,
                kx:kx + stride * (Wo - 1) + 1:stride] += cols[:, :, ky, kx]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def _ray_taps(c, s, det, ts, H, W):
    """Flat pixel indices and bilinear weights of every sample on the rays of one angle."""
    u = det[:, None] * c + ts[None, :] * s
    v = -det[:, None] * s + ts[None, :] * c
    fi = (H - 1) / 2.0 - v
    fj = u + (W - 1) / 2.0
    i0 = np.floor(fi).astype(np.int64)
    j0 = np.floor(fj).astype(np.int64)
    di, dj = fi - i0, fj - j0
    idx, wts = [], []
    for oi, oj in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ii, jj = i0 + oi, j0 + oj
        w = (di if oi else 1.0 - di) * (dj if oj else 1.0 - dj)
        inside = (ii >= 0) & (ii < H) & (jj >= 0) & (jj < W)
        idx.append(np.where(inside, ii * W + jj, 0))
        wts.append(np.where(inside, w, 0.0))
    return np.stack(idx), np.stack(wts)  # (4, D, T)


def radon_project(img, cos_a, sin_a, det, ts, step):
    B, H, W = img.shape
    flat = img.reshape(B, H * W)
    out = np.zeros((B, len(cos_a), len(det)))
    for a in range(len(cos_a)):
        idx, wts = _ray_taps(cos_a[a], sin_a[a], det, ts, H, W)
        vals = flat[:, idx] * wts  # (B, 4, D, T)
        out[:, a] = vals.sum(axis=(1, 3)) * step
    return out


def radon_backproject(sino, cos_a, sin_a, det, ts, step, H, W):
    B = sino.shape[0]
    out = np.zeros((B, H * W))
    for a in range(len(cos_a)):
        idx, wts = _ray_taps(cos_a[a], sin_a[a], det, ts, H, W)
        flat_idx = idx.reshape(-1)
        for b in range(B):
            contrib = wts * (sino[b, a][None, :, None] * step)
            out[b] += np.bincount(flat_idx, weights=contrib.reshape(-1), minlength=H * W)
    return out.reshape(B, H, W)


def fbp_backproject(filt, cos_a, sin_a, det0, spacing, H, W):
    B, A, D = filt.shape
    v = (H - 1) / 2.0 - np.arange(H)[:, None]
    u = np.arange(W)[None, :] - (W - 1) / 2.0
    out = np.zeros((B, H, W))
    for a in range(A):
        s = (u * cos_a[a] - v * sin_a[a] - det0) / spacing
        k0 = np.floor(s).astype(np.int64)
        f = s - k0
        for off, w in ((0, 1.0 - f), (1, f)):
            k = k0 + off
            ok = (k >= 0) & (k < D)
            out += np.where(ok, w, 0.0) * filt[:, a, :][:, np.where(ok, k, 0)]
    return out
