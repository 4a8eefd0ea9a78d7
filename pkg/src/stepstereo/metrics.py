"""Disparity and edge quality metrics with region-split reports.

All metrics run on numpy arrays over an explicit validity mask:

* ``epe`` — mean absolute disparity error;
* ``err_rate`` — fraction of pixels with error strictly above a threshold;
* ``d1`` — the two-condition outlier rate (error > 3 px AND > 5% of gt);
* ``edge_f1`` — F1 of a binarized edge prediction against binary gt.

``region_split_eval`` repeats the disparity metrics over five regions: all
valid pixels, the edge band (binary gt edges dilated by one 3x3 step),
its complement, and the non-occluded/occluded partitions.  Empty regions
are omitted and flagged rather than reported as zeros.

Reports serialize to flat CSV rows with a fixed column order
(:data:`REPORT_COLUMNS`), one row per sample per split, plus aggregate rows
that average the per-sample metrics with equal sample weight.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

ERR_THRESHOLDS = (1.0, 2.0, 3.0)
REPORT_COLUMNS = (
    "sample",
    "split",
    "n_valid",
    "gt_density",
    "epe",
    "bad1",
    "bad2",
    "bad3",
    "d1",
)


def _check(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or valid.shape != gt.shape:
        raise ContractViolation("metric inputs must share a shape")
    if not valid.any():
        raise ContractViolation("metrics need at least one valid pixel")
    return pred, gt, valid


def epe(pred, gt, valid):
    """Mean absolute error over valid pixels."""
    pred, gt, valid = _check(pred, gt, valid)
    return float(np.mean(np.abs(pred - gt)[valid]))


def err_rate(pred, gt, valid, tau):
    """Fraction of valid pixels with |error| strictly greater than tau."""
    if not tau > 0:
        raise ContractViolation(f"threshold must be positive, got {tau}")
    pred, gt, valid = _check(pred, gt, valid)
    return float(np.mean(np.abs(pred - gt)[valid] > tau))


def d1(pred, gt, valid):
    """Outlier rate: |error| > 3 px and |error| > 5% of the true disparity."""
    pred, gt, valid = _check(pred, gt, valid)
    err = np.abs(pred - gt)[valid]
    ref = gt[valid]
    return float(np.mean((err > 3.0) & (err > 0.05 * ref)))


def dilate3(mask):
    """One binary dilation step with a full 3x3 structuring element."""
    mask = np.asarray(mask, dtype=bool)
    out = mask.copy()
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out |= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    return out


@dataclass
class MetricReport:
    """Metrics for one pixel set, with nested per-region sub-reports."""

    n_valid: int
    gt_density: float
    epe: float
    err_rates: dict
    d1: float
    splits: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)


def _single_report(pred, gt, valid):
    return MetricReport(
        n_valid=int(valid.sum()),
        gt_density=float(valid.mean()),
        epe=epe(pred, gt, valid),
        err_rates={tau: err_rate(pred, gt, valid, tau) for tau in ERR_THRESHOLDS},
        d1=d1(pred, gt, valid),
    )


def region_split_eval(pred, gt, valid, edge_gt, occlusion):
    """Metrics over {all, edge, non_edge, noc, occ}; empty splits are flagged.

    The edge region is the binary ground-truth edge map dilated once by a
    3x3 element (a one-pixel line is too thin to measure blurring on), and
    is always intersected with the validity mask.
    """
    pred, gt, valid = _check(pred, gt, valid)
    edge_band = dilate3(np.asarray(edge_gt, dtype=np.float64) >= 0.5)
    occlusion = np.asarray(occlusion, dtype=bool)
    report = _single_report(pred, gt, valid)
    regions = {
        "edge": valid & edge_band,
        "non_edge": valid & ~edge_band,
        "noc": valid & ~occlusion,
        "occ": valid & occlusion,
    }
    for name, mask in regions.items():
        if mask.any():
            report.splits[name] = _single_report(pred, gt, mask)
        else:
            report.flags.append(f"empty split: {name}")
    return report


def edge_f1(edge_pred, edge_gt, bin_thresh=0.5):
    """F1 of ``edge_pred >= bin_thresh`` against a binary ground truth.

    Returns ``(f1, undefined)``; an all-zero ground truth leaves F1
    undefined, reported as ``(None, True)``.
    """
    pred = np.asarray(edge_pred, dtype=np.float64) >= bin_thresh
    gt = np.asarray(edge_gt, dtype=np.float64) >= 0.5
    if pred.shape != gt.shape:
        raise ContractViolation("edge maps must share a shape")
    if not gt.any():
        return None, True
    tp = float(np.sum(pred & gt))
    fp = float(np.sum(pred & ~gt))
    fn = float(np.sum(~pred & gt))
    denom = 2.0 * tp + fp + fn
    return (2.0 * tp / denom if denom else 0.0), False


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def report_rows(sample_id, report):
    """Flatten a report into CSV rows: the 'all' row plus one per split."""

    def row(split_name, r):
        return {
            "sample": sample_id,
            "split": split_name,
            "n_valid": r.n_valid,
            "gt_density": repr(r.gt_density),
            "epe": repr(r.epe),
            "bad1": repr(r.err_rates[1.0]),
            "bad2": repr(r.err_rates[2.0]),
            "bad3": repr(r.err_rates[3.0]),
            "d1": repr(r.d1),
        }

    rows = [row("all", report)]
    for name in sorted(report.splits):
        rows.append(row(name, report.splits[name]))
    return rows


def write_report_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def aggregate_reports(sample_reports, label="aggregate"):
    """Average per-sample metrics (equal sample weight) per split."""
    splits = {}
    for report in sample_reports:
        splits.setdefault("all", []).append(report)
        for name, sub in report.splits.items():
            splits.setdefault(name, []).append(sub)
    rows = []
    for name in sorted(splits):
        group = splits[name]
        rows.append(
            {
                "sample": label,
                "split": name,
                "n_valid": sum(r.n_valid for r in group),
                "gt_density": repr(float(np.mean([r.gt_density for r in group]))),
                "epe": repr(float(np.mean([r.epe for r in group]))),
                "bad1": repr(float(np.mean([r.err_rates[1.0] for r in group]))),
                "bad2": repr(float(np.mean([r.err_rates[2.0] for r in group]))),
                "bad3": repr(float(np.mean([r.err_rates[3.0] for r in group]))),
                "d1": repr(float(np.mean([r.d1 for r in group]))),
            }
        )
    return rows
