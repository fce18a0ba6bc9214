"""Depth-quality metrics with multiplicative mean alignment."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("mae", "abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "delta1", "delta2", "delta3")


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixels: int

    def as_row(self) -> list:
        return [getattr(self, n) for n in METRIC_NAMES] + [self.valid_pixels]


def valid_mask(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return (gt > 0) & (pred > 0) & np.isfinite(gt) & np.isfinite(pred)


def align_mean(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Scale ``pred`` so its masked mean equals that of ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = valid_mask(pred, gt)
    if not mask.any():
        raise EmptyMaskError("no valid pixels to align")
    mp, mg = pred[mask].mean(), gt[mask].mean()
    if mp <= 0 or mg <= 0:
        raise EmptyMaskError("masked means must be positive")
    return pred * (mg / mp)


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None, align: bool = True) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    base = valid_mask(pred, gt)
    mask = base if mask is None else (np.asarray(mask, dtype=bool) & base)
    if not mask.any():
        raise EmptyMaskError("no valid pixels")
    if align:
        pred = align_mean(pred, gt, mask)
    d, p = gt[mask], pred[mask]
    diff = p - d
    ratio = np.maximum(p / d, d / p)
    return MetricsReport(
        mae=float(np.mean(np.abs(diff))),
        abs_rel=float(np.mean(np.abs(diff) / d)),
        sq_rel=float(np.mean(diff**2 / d)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(d)) ** 2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(d)))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        valid_pixels=int(mask.sum()),
    )


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    """Unweighted per-image mean; valid_pixels is summed."""
    if not reports:
        raise ValueError("no reports to aggregate")
    vals = {n: float(np.mean([getattr(r, n) for r in reports])) for n in METRIC_NAMES}
    return MetricsReport(**vals, valid_pixels=int(sum(r.valid_pixels for r in reports)))


def report_csv(named: list[tuple[str, MetricsReport]]) -> str:
    """One row per image, sorted by name, then a final ``mean`` row."""
    named = sorted(named, key=lambda t: t[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("image",) + METRIC_NAMES + ("valid_pixels",))
    for name, r in named:
        w.writerow([name] + [repr(v) for v in r.as_row()[:-1]] + [r.valid_pixels])
    m = mean_report([r for _, r in named])
    w.writerow(["mean"] + [repr(v) for v in m.as_row()[:-1]] + [m.valid_pixels])
    return buf.getvalue()

