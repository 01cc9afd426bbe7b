"""PSNR and MS-SSIM on [0, 1] images laid out [3, H, W] (or [B, 3, H, W])."""
import math

import numpy as np
from scipy import signal

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a, b):
    """-10 log10(MSE); +inf for identical inputs."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def log_msssim(value):
    """MS-SSIM on the log scale, -10 log10(1 - value)."""
    return math.inf if value >= 1.0 else -10.0 * math.log10(1.0 - value)


def gaussian_window(size=WIN, sigma=SIGMA):
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def scale_count(h, w, max_scales=5):
    m = min(h, w)
    for s in range(max_scales, 0, -1):
        if m >= 2 ** (s - 1) * WIN:
            return s
    raise DimensionError(f"{h}x{w} image too small for MS-SSIM with an {WIN}x{WIN} window")


def _ssim_terms(a, b, win):
    f = lambda img: signal.correlate2d(img, win, mode="valid")  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    saa = f(a * a) - mu_a * mu_a
    sbb = f(b * b) - mu_b * mu_b
    sab = f(a * b) - mu_a * mu_b
    c1, c2 = K1 ** 2, K2 ** 2
    cs = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _pool(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def msssim(a, b, max_scales=5):
    """Multi-scale SSIM averaged over channels.

    The number of scales shrinks to fit small images and the exponents are
    renormalised to sum to one. Negative contrast terms are clamped to 0.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"msssim: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim == 4:
        return float(np.mean([msssim(x, y, max_scales) for x, y in zip(a, b)]))
    scales = scale_count(a.shape[-2], a.shape[-1], max_scales)
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    weights /= weights.sum()
    win = gaussian_window()
    vals = []
    for ca, cb in zip(a, b):
        out = 1.0
        for s in range(scales):
            ssim, cs = _ssim_terms(ca, cb, win)
            term = ssim if s == scales - 1 else cs
            out *= max(term, 0.0) ** weights[s]
            if s < scales - 1:
                ca, cb = _pool(ca), _pool(cb)
        vals.append(out)
    return float(np.mean(vals))


def msssim_tensor(a, b, max_scales=5):
    """Differentiable MS-SSIM for [B, C, H, W] tensors (mean over batch and channels)."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    B, C, H, W = a.shape
    scales = scale_count(H, W, max_scales)
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    weights /= weights.sum()
    win = Tensor(gaussian_window()[None, None])
    pool = Tensor(np.full((1, 1, 2, 2), 0.25))
    x = T.reshape(a, (B * C, 1, H, W))
    y = T.reshape(b, (B * C, 1, H, W))
    c1, c2 = K1 ** 2, K2 ** 2
    log_total = None
    for s in range(scales):
        f = lambda img: T.conv2d(img, win)  # noqa: E731
        mx, my = f(x), f(y)
        sxx = f(T.square(x)) - T.square(mx)
        syy = f(T.square(y)) - T.square(my)
        sxy = f(x * y) - mx * my
        cs = (sxy * 2.0 + c2) / (sxx + syy + c2)
        if s == scales - 1:
            lum = (mx * my * 2.0 + c1) / (T.square(mx) + T.square(my) + c1)
            cs = lum * cs
        term = T.mean(T.reshape(cs, (B * C, -1)), axis=1)
        term = T.lower_bound(term, 1e-12)
        part = T.log(term) * float(weights[s])
        log_total = part if log_total is None else log_total + part
        if s < scales - 1:
            x = T.conv2d(x, pool, stride=2)
            y = T.conv2d(y, pool, stride=2)
    return T.mean(T.exp(log_total))
