"""RMSE / PSNR / SSIM and their mean +/- std aggregation.

Metrics are computed in standardized units on full images.  The PSNR range
defaults to the ground-truth image's max - min, overridable per call.  SSIM
follows the classic Gaussian-window formulation (11x11, sigma 1.5,
K1=0.01, K2=0.03) evaluated only where the full window fits, and the
aggregate uses the population standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .validation import check_array, check_positive, check_same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rmse(a, b) -> float:
    a = check_array(a, "a")
    b = check_array(b, "b")
    check_same_shape(a, b, "rmse")
    diff = (a - b).ravel()
    return float(np.sqrt(np.mean(diff * diff)))


def psnr(a, b, data_range: float) -> float:
    """20*log10(range / rmse); +inf for identical images."""
    check_positive(data_range, "data_range")
    err = rmse(a, b)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range / err)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable Gaussian-weighted local sums over fully interior windows."""
    size = window.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, size, axis=0) @ window
    return np.lib.stride_tricks.sliding_window_view(rows, size, axis=1) @ window


def ssim(a, b, data_range: float, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    a = check_array(a, "a", ndim=2)
    b = check_array(b, "b", ndim=2)
    check_same_shape(a, b, "ssim")
    check_positive(data_range, "data_range")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} SSIM window")

    w1d = _gaussian_window(window, sigma)
    mu_a = _filter_valid(a, w1d)
    mu_b = _filter_valid(b, w1d)
    var_a = _filter_valid(a * a, w1d) - mu_a * mu_a
    var_b = _filter_valid(b * b, w1d) - mu_b * mu_b
    cov = _filter_valid(a * b, w1d) - mu_a * mu_b

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class ImageMetrics:
    image_id: str
    rmse: float
    psnr: float
    ssim: float

    def __post_init__(self):
        if self.rmse < 0:
            raise ValueError("rmse must be >= 0")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")


def score_image(image_id: str, output: np.ndarray, reference: np.ndarray,
                data_range: Optional[float] = None) -> ImageMetrics:
    """All three metrics for one image; range defaults to the reference span."""
    if data_range is None:
        data_range = float(reference.max() - reference.min())
        if data_range <= 0.0:
            data_range = 1.0  # constant reference: fall back to a unit range
    return ImageMetrics(
        image_id=image_id,
        rmse=rmse(output, reference),
        psnr=psnr(output, reference, data_range),
        ssim=ssim(output, reference, data_range),
    )


@dataclass
class MetricsReport:
    """Per-image metrics plus mean / population-std aggregates for one run."""

    label: str
    per_image: List[ImageMetrics]
    rmse_mean: float
    rmse_std: float
    psnr_mean: float
    psnr_std: float
    psnr_inf_count: int
    ssim_mean: float
    ssim_std: float
    data_range_note: str = "per-image reference max-min"

    @property
    def n_images(self) -> int:
        return len(self.per_image)


def aggregate(label: str, items: Sequence[ImageMetrics],
              data_range_note: str = "per-image reference max-min") -> MetricsReport:
    """Mean and population standard deviation per metric; infinite PSNR
    entries are excluded from the PSNR aggregate and counted."""
    items = list(items)
    if not items:
        raise ValueError("cannot aggregate an empty metrics list")
    rmses = np.array([m.rmse for m in items])
    ssims = np.array([m.ssim for m in items])
    psnrs = np.array([m.psnr for m in items])
    finite = psnrs[np.isfinite(psnrs)]
    inf_count = int(len(psnrs) - len(finite))
    if len(finite):
        psnr_mean, psnr_std = float(finite.mean()), float(finite.std())
    else:
        psnr_mean, psnr_std = math.inf, 0.0
    return MetricsReport(
        label=label,
        per_image=items,
        rmse_mean=float(rmses.mean()),
        rmse_std=float(rmses.std()),
        psnr_mean=psnr_mean,
        psnr_std=psnr_std,
        psnr_inf_count=inf_count,
        ssim_mean=float(ssims.mean()),
        ssim_std=float(ssims.std()),
        data_range_note=data_range_note,
    )


def format_row(report: MetricsReport) -> str:
    """`0.0391±0.0042 / 29.30±0.96 / 0.7161±0.0239` style row values."""
    if math.isinf(report.psnr_mean):
        psnr_part = "inf"
    else:
        psnr_part = f"{report.psnr_mean:.2f}±{report.psnr_std:.2f}"
    return (
        f"{report.rmse_mean:.4f}±{report.rmse_std:.4f}  "
        f"{psnr_part}  "
        f"{report.ssim_mean:.4f}±{report.ssim_std:.4f}"
    )


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned plain-text table (mean +/- population standard deviation)."""
    lines = [
        "metrics (mean ± population std)",
        f"{'label':<12}  {'RMSE':<16}  {'PSNR':<14}  {'SSIM':<16}  images",
    ]
    for r in reports:
        row = format_row(r).split("  ")
        extra = f"  [{r.psnr_inf_count} inf PSNR excluded]" if r.psnr_inf_count else ""
        lines.append(f"{r.label:<12}  {row[0]:<16}  {row[1]:<14}  {row[2]:<16}  {r.n_images}{extra}")
    return "\n".join(lines) + "\n"


CSV_HEADER = "variant,rmse_mean,rmse_std,psnr_mean,psnr_std,ssim_mean,ssim_std"


def to_csv(reports: Sequence[MetricsReport]) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(
            f"{r.label},{r.rmse_mean!r},{r.rmse_std!r},{r.psnr_mean!r},"
            f"{r.psnr_std!r},{r.ssim_mean!r},{r.ssim_std!r}"
        )
    return "\n".join(lines) + "\n"
