"""Reference PSNR / slice-SSIM values for the acceptance metric check.

Volumes come from a 32-bit LCG that the Rust test reproduces bit for bit.
SSIM uses scikit-image (Gaussian window, sigma 1.5, population covariance,
data range 1) on every axial slice, averaged over slices.
"""

import numpy as np
from skimage.metrics import structural_similarity


def lcg(seed, n):
    out = np.empty(n, dtype=np.float32)
    s = seed & 0xFFFFFFFF
    for i in range(n):
        s = (s * 1664525 + 1013904223) & 0xFFFFFFFF
        out[i] = np.float32((s >> 8) / float(1 << 24))
    return out


def f32(x):
    return np.float32(x)


def pair(k):
    if k == 0:
        r = 16
        return r, lcg(1, r**3), lcg(2, r**3)
    if k == 1:
        r = 32
        a = lcg(3, r**3)
        u = lcg(4, r**3)
        return r, a, np.clip(a + f32(0.1) * (u - f32(0.5)), f32(0), f32(1))
    if k == 2:
        r = 16
        a = (lcg(5, r**3) > f32(0.5)).astype(np.float32)
        return r, a, f32(1) - a
    if k == 3:
        r = 16
        a = lcg(6, r**3)
        return r, a, np.minimum(a + f32(0.1), f32(1))
    r = 24
    u = lcg(7, r**3)
    a = u * u
    return r, a, a * f32(0.8) + f32(0.1)


def psnr(a, b):
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return 10 * np.log10(1.0 / mse)


def ssim_slices(a, b, r):
    a = a.astype(np.float64).reshape(r, r, r)
    b = b.astype(np.float64).reshape(r, r, r)
    vals = [
        structural_similarity(
            a[z], b[z], gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
        )
        for z in range(r)
    ]
    return float(np.mean(vals))


if __name__ == "__main__":
    for k in range(5):
        r, a, b = pair(k)
        print(f"({psnr(a, b):.12f}, {ssim_slices(a, b, r):.12f}),")
