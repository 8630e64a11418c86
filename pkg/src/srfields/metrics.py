"""Image fidelity metrics (PSNR, single-scale SSIM) and the box/tent
downsampling kernels used as degradation models.

All images are float arrays in [0, 1] with shape (H, W, 3) or (H, W).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = [
    "PSNR_CAP",
    "psnr", "ssim", "downsample_average", "downsample_tent",
    "write_metrics_report",
]

PSNR_CAP = 99.0  # reported instead of +inf for identical images


def _check_image(name: str, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError(f"{name}: expected (H, W) or (H, W, C), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name}: image has non-finite values")
    return img


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0, capped at PSNR_CAP."""
    a, b = _check_image("a", a), _check_image("b", b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: dimension mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully-covered (valid) positions."""
    k = window.size
    h, w = img.shape
    # rows
    out = np.zeros((h, w - k + 1))
    for i, coef in enumerate(window):
        out += coef * img[:, i:i + w - k + 1]
    # columns
    out2 = np.zeros((h - k + 1, out.shape[1]))
    for i, coef in enumerate(window):
        out2 += coef * out[i:i + h - k + 1, :]
    return out2


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11,
         sigma: float = 1.5) -> float:
    """Single-scale structural similarity with a Gaussian window.

    C1 = 0.01^2 and C2 = 0.03^2 at peak 1.0; the map is averaged over all
    valid window positions and channels.
    """
    a, b = _check_image("a", a), _check_image("b", b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: dimension mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window_size:
        raise ValueError(f"ssim: image smaller than the {window_size}px window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    window = _gaussian_window(window_size, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _filter_valid(x, window)
        mu_y = _filter_valid(y, window)
        xx = _filter_valid(x * x, window) - mu_x * mu_x
        yy = _filter_valid(y * y, window) - mu_y * mu_y
        xy = _filter_valid(x * y, window) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        values.append(num / den)
    return float(np.mean(values))


def downsample_average(img: np.ndarray, s: int) -> np.ndarray:
    """Box ("average") kernel: each output pixel is the mean of its s x s block."""
    img = _check_image("img", img)
    if s < 1:
        raise ValueError("scale must be >= 1")
    h, w = img.shape[:2]
    if h % s or w % s:
        raise ValueError(f"downsample_average: {h}x{w} not divisible by {s}")
    if img.ndim == 2:
        img = img[..., None]
        squeeze = True
    else:
        squeeze = False
    out = img.reshape(h // s, s, w // s, s, img.shape[2]).mean(axis=(1, 3))
    return out[..., 0] if squeeze else out


def _tent_kernel(s: int) -> np.ndarray:
    """Triangle kernel of 2s taps: weight_j proportional to s - |j + 0.5 - s|.

    For s=2 this is [1, 3, 3, 1] / 8. Tap j of output pixel i reads input
    pixel s*i + j - s//2 - (s odd adjustment); see downsample_tent.
    """
    j = np.arange(2 * s)
    w = s - np.abs(j + 0.5 - s)
    return w / w.sum()


def downsample_tent(img: np.ndarray, s: int) -> np.ndarray:
    """Tent-kernel downsampling (the deliberately mismatched degradation).

    Separable triangle filter of 2s taps centered on each output pixel's
    footprint, stride s, mirror padding at the borders. The kernel for s=2
    is [1, 3, 3, 1]/8.
    """
    img = _check_image("img", img)
    if s < 1:
        raise ValueError("scale must be >= 1")
    h, w = img.shape[:2]
    if h % s or w % s:
        raise ValueError(f"downsample_tent: {h}x{w} not divisible by {s}")
    if s == 1:
        return img.copy()
    if img.ndim == 2:
        img = img[..., None]
        squeeze = True
    else:
        squeeze = False
    kern = _tent_kernel(s)
    pad = s // 2  # taps for output i span s*i - pad .. s*i - pad + 2s - 1

    def one_axis(arr):  # filter + stride along axis 0
        padded = np.concatenate([arr[pad:0:-1], arr, arr[-2:-2 - pad:-1]], axis=0)
        n_out = arr.shape[0] // s
        out = np.zeros((n_out,) + arr.shape[1:])
        for j, coef in enumerate(kern):
            out += coef * padded[j:j + n_out * s:s]
        return out

    out = one_axis(img)
    out = np.swapaxes(one_axis(np.swapaxes(out, 0, 1)), 0, 1)
    return out[..., 0] if squeeze else out


def write_metrics_report(rows: list[dict], txt_path, json_path) -> None:
    """Write metric rows as both a plain-text table and JSON.

    Each row: scene, view, method, psnr, ssim. LPIPS is reported as an
    unavailable column (requires a pretrained network, deliberately absent).
    """
    rows = [dict(r, lpips=None) for r in rows]
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w") as fh:
        json.dump(rows, fh, indent=2)

    header = f"{'scene':<16} {'view':>4} {'method':<14} {'psnr':>7} {'ssim':>7} {'lpips':>6}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['scene']:<16} {r['view']:>4} {r['method']:<14} "
                     f"{r['psnr']:>7.2f} {r['ssim']:>7.4f} {'n/a':>6}")
    Path(txt_path).parent.mkdir(parents=True, exist_ok=True)
    Path(txt_path).write_text("\n".join(lines) + "\n")
