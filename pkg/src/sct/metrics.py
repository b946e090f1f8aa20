"""Image-quality metrics: RMSE, PSNR, SSIM and ROI means."""
from __future__ import annotations

import numpy as np

PSNR_CAP = 300.0


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, peak: float = 1.0) -> float:
    """``20 log10(peak / rmse)``, capped at 300 dB (identical inputs)."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = rmse(a, b)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 20.0 * np.log10(peak / err)))


def _window_sums(img, w):
    # summed-area table; exact for the sums of each w x w window
    c = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    c[1:, 1:] = img.cumsum(0).cumsum(1)
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean SSIM over all ``window x window`` windows at stride 1.

    Window statistics are uniform-weight means and population (1/n)
    variances and covariance.
    """
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    n = float(window * window)
    # center both images on their joint mean to keep the moment sums well conditioned
    shift = 0.5 * (a.mean() + b.mean())
    a = a - shift
    b = b - shift
    ma = _window_sums(a, window) / n
    mb = _window_sums(b, window) / n
    va = np.maximum(_window_sums(a * a, window) / n - ma * ma, 0.0)
    vb = np.maximum(_window_sums(b * b, window) / n - mb * mb, 0.0)
    cov = _window_sums(a * b, window) / n - ma * mb
    ma = ma + shift
    mb = mb + shift
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * ma * mb + c1) * (2 * cov + c2)
    den = (ma * ma + mb * mb + c1) * (va + vb + c2)
    return float(np.mean(num / den))


def roi_mean(f: np.ndarray, roi: np.ndarray, material: int) -> float:
    roi = np.asarray(roi, dtype=bool)
    if not roi.any():
        raise ValueError("ROI is empty")
    ch = f[:, :, material] if f.ndim == 3 else f
    if roi.shape != ch.shape:
        raise ValueError("ROI shape does not match the image")
    return float(ch[roi].mean())


def roi_report(truth: np.ndarray, results: dict, rois: dict, materials, peak: float = 1.0,
               window: int = 8) -> dict:
    """Metrics per (ROI, method, material).

    ``rois`` maps names to boolean masks. SSIM is computed over the ROI's
    bounding box; the other metrics over the ROI pixels.
    """
    out = {"metadata": {"ssim_window": window, "ssim_k1": 0.01, "ssim_k2": 0.03,
                        "psnr_peak": peak, "psnr_cap_db": PSNR_CAP},
           "rois": {}}
    for name, mask in rois.items():
        if not mask.any():
            raise ValueError(f"ROI {name!r} is empty")
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        box = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
        entry = {}
        for method, f in results.items():
            entry[method] = {}
            for m, mat in enumerate(materials):
                t = truth[:, :, m]
                e = f[:, :, m]
                rec = {"rmse": rmse(e[mask], t[mask]), "psnr": psnr(e[mask], t[mask], peak),
                       "mean": roi_mean(f, mask, m)}
                tb, eb = t[box], e[box]
                rec["ssim"] = ssim(eb, tb, window, peak=peak) if min(tb.shape) >= window else None
                entry[method][mat] = rec
        out["rois"][name] = entry
    return out
