"""Volume similarity metrics in normalised [-1, 1] space."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import RevGANError, ShapeError

PEAK = 2.0
SSIM_WINDOW = 7


def _pair(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric operands differ in shape: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = PEAK) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` for identical inputs."""
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / err))


def ssim(a, b, window: int = SSIM_WINDOW, k1: float = 0.01, k2: float = 0.03,
         data_range: float = PEAK) -> float:
    """Mean 3-D SSIM over every fully contained ``window^3`` uniform window.

    Local statistics are population (biased) moments of each window.
    """
    a, b = _pair(a, b)
    if a.ndim != 3:
        raise ShapeError(f"ssim expects 3-D volumes, got shape {a.shape}")
    if min(a.shape) < window:
        raise ShapeError(f"volume extent {a.shape} is smaller than the {window}^3 SSIM window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    half = window // 2
    valid = tuple(slice(half, n - (window - 1 - half)) for n in a.shape)

    def local_mean(v):
        return ndimage.uniform_filter(v, size=window, mode="constant")[valid]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    volume_ids: list
    mae: list
    psnr_db: list
    ssim: list
    mean: dict = field(default_factory=dict)
    stddev: dict = field(default_factory=dict)

    COLUMNS = ("volume_id", "mae", "psnr_db", "ssim")

    def __len__(self):
        return len(self.volume_ids)

    def rows(self):
        for row in zip(self.volume_ids, self.mae, self.psnr_db, self.ssim):
            yield list(row)
        yield ["mean"] + [self.mean[k] for k in self.COLUMNS[1:]]
        yield ["stddev"] + [self.stddev[k] for k in self.COLUMNS[1:]]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
        return path


def _fmt(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _spread(values):
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if np.isinf(v).any():
        mean = float(np.mean(v))
        return mean, (0.0 if len(v) == 1 or np.all(v == v[0]) else math.nan)
    return float(v.mean()), (float(v.std(ddof=1)) if len(v) > 1 else 0.0)


def evaluate_set(preds, targets, ids=None) -> MetricReport:
    """Per-volume MAE / PSNR / SSIM plus mean and sample standard deviation."""
    preds, targets = list(preds), list(targets)
    if not preds:
        raise RevGANError("evaluate_set needs at least one volume")
    if len(preds) != len(targets):
        raise RevGANError(f"{len(preds)} predictions but {len(targets)} targets")
    ids = list(ids) if ids is not None else [f"vol{i:03d}" for i in range(len(preds))]
    report = MetricReport(ids, [], [], [])
    for p, t in zip(preds, targets):
        report.mae.append(mae(p, t))
        report.psnr_db.append(psnr(p, t))
        report.ssim.append(ssim(p, t))
    for key in MetricReport.COLUMNS[1:]:
        report.mean[key], report.stddev[key] = _spread(getattr(report, key))
    return report
