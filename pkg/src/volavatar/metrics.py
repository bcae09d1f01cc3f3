"""Image metrics: L1, PSNR and Gaussian-window SSIM."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_INF = float("inf")


class SizeMismatchError(ValueError):
    pass


def _prep(img, ref, mask):
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise SizeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != a.shape[:2]:
            raise SizeMismatchError(f"mask shape {m.shape} does not match image {a.shape[:2]}")
        m = m > 0.5
    else:
        m = None
    return a, b, m


def metric_l1(img, ref, mask=None):
    a, b, m = _prep(img, ref, mask)
    d = np.abs(a - b)
    return float(d[m].mean() if m is not None else d.mean())


def mse(img, ref, mask=None):
    a, b, m = _prep(img, ref, mask)
    d = (a - b) ** 2
    return float(d[m].mean() if m is not None else d.mean())


def metric_psnr(img, ref, mask=None):
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``inf``."""
    e = mse(img, ref, mask)
    return PSNR_INF if e == 0 else float(10.0 * np.log10(1.0 / e))


def ssim_map(img, ref, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0, truncate=3.5):
    """Per-pixel SSIM (mean over channels) with an 11x11 Gaussian window."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise SizeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    # truncate=3.5 with sigma=1.5 gives radius 5, i.e. an 11x11 window
    filt = lambda x: gaussian_filter(x, sigma=(sigma, sigma, 0), truncate=truncate, mode="reflect")  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return (num / den).mean(axis=-1)


def metric_ssim(img, ref, mask=None, border=5):
    """Mean SSIM over the window-valid interior (``border`` pixels cropped), optionally masked."""
    a, b, m = _prep(img, ref, mask)
    s = ssim_map(a, b)
    if border and min(s.shape[:2]) > 2 * border:
        s = s[border:-border, border:-border]
        m = None if m is None else m[border:-border, border:-border]
    if m is not None:
        return float(s[m].mean()) if m.any() else float("nan")
    return float(s.mean())
