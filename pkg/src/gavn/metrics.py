"""PSNR, SSIM, MS-SSIM and landmark-derived region PSNR.

Images are float arrays in ``[0, data_range]``, either ``(3, H, W)`` or
``(H, W)``. SSIM works on the channel-mean grayscale image.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from gavn.synthclip import EYE_IDS, MOUTH_IDS

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
REGION_DILATION = 4
REGIONS = {"mouth": MOUTH_IDS, "eyes": EYE_IDS}


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b, data_range: float = 1.0) -> float:
    """PSNR in dB; identical inputs give the 100 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def _gray(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.mean(axis=0)
    if x.ndim != 2:
        raise ValueError(f"expected (C, H, W) or (H, W) image, got shape {x.shape}")
    return x


def _gauss_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable filtering keeping only fully-covered positions."""
    half = len(w) // 2
    y = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return y[half : x.shape[0] - half, half : x.shape[1] - half]


def _ssim_maps(a: np.ndarray, b: np.ndarray, data_range: float) -> tuple[np.ndarray, np.ndarray]:
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = _gauss_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a**2
    sbb = _filter_valid(b * b, w) - mu_b**2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    cs = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return lum * cs, cs


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _gray(a), _gray(b)
    _check_shapes(a, b)
    return float(_ssim_maps(a, b, data_range)[0].mean())


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_levels(size: int, levels: int = 5) -> int:
    """Scales usable while the coarsest image still holds an SSIM window."""
    n = 1
    while n < levels and size // (2**n) >= SSIM_WINDOW:
        n += 1
    return n


def ms_ssim(a, b, levels: int = 5, weights=None, data_range: float = 1.0) -> float:
    """Multi-scale SSIM with 2x2 average-pool downsampling between scales.

    Images too small for ``levels`` scales use fewer, with the leading weights
    renormalised to sum to one. Negative contrast-structure terms are clamped
    to zero so fractional powers stay real.
    """
    a, b = _gray(a), _gray(b)
    _check_shapes(a, b)
    w = np.asarray(MS_SSIM_WEIGHTS[:levels] if weights is None else weights, dtype=np.float64)
    if len(w) != levels:
        raise ValueError(f"{levels} levels need {levels} weights, got {len(w)}")
    n = ms_ssim_levels(min(a.shape), levels)
    if n < levels:
        w = w[:n] / w[:n].sum()
    value = 1.0
    for i in range(n):
        s_map, cs_map = _ssim_maps(a, b, data_range)
        term = s_map.mean() if i == n - 1 else cs_map.mean()
        value *= max(float(term), 0.0) ** w[i]
        a, b = _halve(a), _halve(b)
    return float(value)


def region_box(landmarks: np.ndarray, region: str, height: int, width: int,
               dilation: int = REGION_DILATION) -> tuple[int, int, int, int]:
    """(y0, y1, x0, x1) half-open box around a landmark group, dilated and clipped."""
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}; expected one of {sorted(REGIONS)}")
    pts = np.asarray(landmarks, dtype=np.float64)[list(REGIONS[region])]
    x0 = max(int(math.floor(pts[:, 0].min())) - dilation, 0)
    x1 = min(int(math.ceil(pts[:, 0].max())) + dilation + 1, width)
    y0 = max(int(math.floor(pts[:, 1].min())) - dilation, 0)
    y1 = min(int(math.ceil(pts[:, 1].max())) + dilation + 1, height)
    if y1 - y0 < 4 or x1 - x0 < 4:
        raise ValueError(f"degenerate {region} box {(y0, y1, x0, x1)}: smaller than 4x4")
    return y0, y1, x0, x1


def region_psnr(a, b, landmarks, region: str = "mouth", data_range: float = 1.0) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _check_shapes(a, b)
    y0, y1, x0, x1 = region_box(landmarks, region, a.shape[-2], a.shape[-1])
    return psnr(a[..., y0:y1, x0:x1], b[..., y0:y1, x0:x1], data_range)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRICS = ("psnr", "ssim", "ms_ssim")


@dataclass
class MetricReport:
    clip: str
    method: str
    per_frame: dict[str, list[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def means(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.per_frame.items()}

    def to_dict(self) -> dict:
        return {"clip": self.clip, "method": self.method, "per_frame": self.per_frame,
                "means": self.means, "config": self.config}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        d = json.loads(Path(path).read_text())
        return cls(d["clip"], d["method"], d["per_frame"], d.get("config", {}))


def evaluate_frames(gt: np.ndarray, pred: np.ndarray, landmarks: np.ndarray | None = None,
                    clip: str = "", method: str = "", data_range: float = 1.0) -> MetricReport:
    """Per-frame metrics for (T, 3, H, W) stacks; region PSNRs need (T, K, 2) landmarks."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape[0] != pred.shape[0]:
        raise ValueError(f"frame count mismatch: {gt.shape[0]} ground-truth vs {pred.shape[0]} restored")
    _check_shapes(gt, pred)
    per = {k: [] for k in METRICS}
    if landmarks is not None:
        per.update({f"psnr_{r}": [] for r in REGIONS})
    for t in range(gt.shape[0]):
        per["psnr"].append(psnr(pred[t], gt[t], data_range))
        per["ssim"].append(ssim(pred[t], gt[t], data_range))
        per["ms_ssim"].append(ms_ssim(pred[t], gt[t], data_range=data_range))
        if landmarks is not None:
            for r in REGIONS:
                per[f"psnr_{r}"].append(region_psnr(pred[t], gt[t], landmarks[t], r, data_range))
    config = {"data_range": data_range, "ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA,
              "ms_ssim_levels": ms_ssim_levels(min(gt.shape[-2:])), "region_dilation": REGION_DILATION,
              "psnr_cap": PSNR_CAP}
    return MetricReport(clip, method, per, config)


def write_table(reports: list[MetricReport], path: str | Path) -> None:
    """Aggregate CSV: one row per method, one column per metric (mean over clips)."""
    methods = sorted({r.method for r in reports})
    cols = sorted({k for r in reports for k in r.per_frame})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "clips", *cols])
        for m in methods:
            rs = [r for r in reports if r.method == m]
            row = [m, len(rs)]
            for c in cols:
                vals = [r.means[c] for r in rs if c in r.per_frame]
                row.append(f"{np.mean(vals):.4f}" if vals else "")
            w.writerow(row)
