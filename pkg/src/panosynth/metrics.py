"""Image-quality metrics: masked PSNR, SSIM, MS-SSIM (luma).

SSIM statistics use an 11x11 gaussian window (sigma 1.5) over windows that
fit fully inside the image (valid region); masks are cropped to the same
region. MS-SSIM downsamples dyadically by 2x2 mean; images too small for the
standard 5 scales use fewer scales with renormalized weights. Contrast terms
are floored at zero before the weighted geometric product (negative bases
under fractional exponents are undefined); plain SSIM is reported unfloored,
so strongly anticorrelated textured inputs can mathematically fall below 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .rasters import luma

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10*log10(1/MSE) over [0,1]-range channels; +inf for identical inputs."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    diff = a.astype(np.float64) - b.astype(np.float64)
    if mask is not None:
        if mask.shape != a.shape[:2]:
            raise ValueError("mask shape mismatch")
        if not mask.any():
            raise ValueError("empty mask")
        diff = diff[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable gaussian filtering cropped to fully covered windows."""
    r = (kernel.size - 1) // 2
    out = correlate1d(img, kernel, axis=0, mode="nearest")
    out = correlate1d(out, kernel, axis=1, mode="nearest")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _ssim_stats(ya: np.ndarray, yb: np.ndarray, window: int, sigma: float,
                k1: float, k2: float):
    if min(ya.shape) < window:
        raise ValueError(f"image smaller than ssim window {window}")
    kernel = _gaussian_kernel(window, sigma)
    c1 = k1 * k1
    c2 = k2 * k2
    mu_a = _filter_valid(ya, kernel)
    mu_b = _filter_valid(yb, kernel)
    mu_aa = _filter_valid(ya * ya, kernel)
    mu_bb = _filter_valid(yb * yb, kernel)
    mu_ab = _filter_valid(ya * yb, kernel)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return lum * cs, cs


def _crop_mask(mask: np.ndarray | None, shape, window: int):
    if mask is None:
        return None
    r = (window - 1) // 2
    cropped = mask[r:shape[0] - r, r:shape[1] - r]
    if not cropped.any():
        raise ValueError("mask empty after valid-region crop")
    return cropped


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03,
         mask: np.ndarray | None = None) -> float:
    """Mean SSIM over luma on the valid (fully windowed) region."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    ya = luma(a).astype(np.float64) if a.ndim == 3 else a.astype(np.float64)
    yb = luma(b).astype(np.float64) if b.ndim == 3 else b.astype(np.float64)
    ssim_map, _ = _ssim_stats(ya, yb, window, sigma, k1, k2)
    cropped = _crop_mask(mask, ya.shape, window)
    return float(ssim_map[cropped].mean() if cropped is not None else ssim_map.mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2]
                   + img[1::2, 0::2] + img[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
            k1: float = 0.01, k2: float = 0.03,
            weights: tuple = MS_SSIM_WEIGHTS,
            mask: np.ndarray | None = None) -> float:
    """Multi-scale SSIM; fewer scales with renormalized weights on small inputs."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    ya = luma(a).astype(np.float64) if a.ndim == 3 else a.astype(np.float64)
    yb = luma(b).astype(np.float64) if b.ndim == 3 else b.astype(np.float64)
    usable = 0
    size = min(ya.shape)
    while usable < len(weights) and size >= window:
        usable += 1
        size //= 2
    if usable == 0:
        raise ValueError(f"image smaller than ssim window {window}")
    if usable < len(weights):
        log.debug("ms_ssim using %d of %d scales", usable, len(weights))
    wts = np.asarray(weights[:usable], dtype=np.float64)
    wts = wts / wts.sum()
    m = mask
    value = 1.0
    for scale in range(usable):
        ssim_map, cs_map = _ssim_stats(ya, yb, window, sigma, k1, k2)
        cropped = _crop_mask(m, ya.shape, window)
        if scale < usable - 1:
            cs = cs_map[cropped].mean() if cropped is not None else cs_map.mean()
            value *= max(cs, 0.0) ** wts[scale]
            ya = _downsample2(ya)
            yb = _downsample2(yb)
            if m is not None:
                mm = _downsample2(m.astype(np.float64))
                m = mm >= 0.5
                if not m.any():
                    raise ValueError("mask empty after downsampling")
        else:
            s = ssim_map[cropped].mean() if cropped is not None else ssim_map.mean()
            value *= max(s, 0.0) ** wts[scale]
    return float(value)


def latitude_band_mask(width: int, height: int,
                       max_abs_phi_deg: float = 60.0) -> np.ndarray:
    """True where the pixel-center latitude is within the band.

    Equirectangular pixels near the poles are heavily oversampled, so
    quality metrics are usually reported over a latitude band."""
    j = np.arange(height, dtype=np.float64)
    phi = 0.5 * np.pi - np.pi * (j + 0.5) / height
    row_ok = np.abs(phi) <= np.radians(max_abs_phi_deg)
    return np.repeat(row_ok[:, None], width, axis=1)


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    ms_ssim: float
    mask_description: str

    def to_dict(self) -> dict:
        return {
            "psnr_db": None if np.isinf(self.psnr) else round(self.psnr, 4),
            "psnr_is_inf": bool(np.isinf(self.psnr)),
            "ssim": round(self.ssim, 6),
            "ms_ssim": round(self.ms_ssim, 6),
            "mask": self.mask_description,
        }


def evaluate_pair(pred: np.ndarray, truth: np.ndarray,
                  mask: np.ndarray | None = None,
                  mask_description: str = "full image") -> MetricReport:
    return MetricReport(
        psnr=psnr(pred, truth, mask),
        ssim=ssim(pred, truth, mask=mask),
        ms_ssim=ms_ssim(pred, truth, mask=mask),
        mask_description=mask_description,
    )
