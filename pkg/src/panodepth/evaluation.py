"""Masked depth metrics on equirectangular maps and dataset-level evaluation."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .geometry import latitude_weight
from .imageio import FormatError
from .models import DepthNet, load_checkpoint
from .renderer import manifest_dir, read_manifest, read_triplet
from .training import predict

MIN_GT = 1e-3  # gt below this is left out of ratio-based metrics
THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)
METRICS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3")


@dataclass(frozen=True)
class MetricsRecord:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    d1: float
    d2: float
    d3: float
    valid_px: int
    w_abs_rel: float
    w_sq_rel: float
    w_rmse: float
    w_rmse_log: float
    w_d1: float
    w_d2: float
    w_d3: float

    @classmethod
    def columns(cls):
        return tuple(f.name for f in fields(cls))

    def row(self):
        return [getattr(self, c) for c in self.columns()]


def _weighted(values, w):
    return float(np.sum(values * w) / np.sum(w)) if values.size else float("nan")


def _metrics(pred, gt, w):
    """Metric tuple over flat arrays with per-pixel weights ``w``."""
    err = pred - gt
    rmse = np.sqrt(_weighted(err * err, w))
    ok = gt >= MIN_GT
    p, g, wr = np.maximum(pred[ok], MIN_GT), gt[ok], w[ok]
    abs_rel = _weighted(np.abs(p - g) / g, wr)
    sq_rel = _weighted((p - g) ** 2 / g, wr)
    rmse_log = np.sqrt(_weighted((np.log(p) - np.log(g)) ** 2, wr))
    ratio = np.maximum(p / g, g / p)
    deltas = [_weighted((ratio < t).astype(np.float64), wr) for t in THRESHOLDS]
    return [abs_rel, sq_rel, float(rmse), float(rmse_log), *deltas]


def compute_metrics(pred, gt, mask) -> MetricsRecord:
    """Standard depth metrics over mask = 1 pixels.

    The ``w_`` variants weight each pixel by cos(latitude) of its row,
    normalised over the valid pixels.
    """
    pred, gt, mask = (np.asarray(a) for a in (pred, gt, mask))
    if pred.shape != gt.shape or gt.shape != mask.shape or gt.ndim != 2:
        raise ValueError(f"pred {pred.shape}, gt {gt.shape} and mask {mask.shape} must be equal 2-D shapes")
    m = mask != 0
    n = int(np.count_nonzero(m))
    if n == 0:
        raise ValueError("no valid pixels in mask")
    p, g = pred[m].astype(np.float64), gt[m].astype(np.float64)
    lat = latitude_weight(np.arange(gt.shape[0]), gt.shape[0])
    wl = np.broadcast_to(lat[:, None], gt.shape)[m]
    plain = _metrics(p, g, np.ones_like(g))
    weighted = _metrics(p, g, wl)
    return MetricsRecord(*plain, n, *weighted)


def aggregate(records) -> MetricsRecord:
    """Mean of per-sample records weighted by their valid pixel counts."""
    records = list(records)
    if not records:
        raise ValueError("nothing to aggregate")
    counts = np.array([r.valid_px for r in records], dtype=np.float64)
    values = {}
    for name in MetricsRecord.columns():
        if name == "valid_px":
            values[name] = int(counts.sum())
        else:
            v = np.array([getattr(r, name) for r in records])
            values[name] = float(np.sum(v * counts) / counts.sum())
    return MetricsRecord(**values)


@dataclass
class EvalResult:
    aggregate: MetricsRecord | None
    samples: list  # (sample name, MetricsRecord)
    skipped: list  # (sample name, reason)


def write_metrics_csv(path, samples):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("sample",) + MetricsRecord.columns())
        for name, rec in samples:
            writer.writerow([name] + [repr(v) if isinstance(v, float) else v for v in rec.row()])


def evaluate(checkpoint, manifest, out_csv=None, jobs: int = 1) -> EvalResult:
    """Predict every manifest sample and score it against its ground truth.

    Unreadable samples are listed in ``skipped`` and left out of the
    aggregate. Results follow manifest order for any ``jobs``.
    """
    model = checkpoint if isinstance(checkpoint, DepthNet) else load_checkpoint(checkpoint)
    root = manifest_dir(manifest)
    records = read_manifest(manifest)

    def load(rec):
        try:
            return read_triplet(*(os.path.join(root, p) for p in (rec.color, rec.depth, rec.mask))), None
        except (OSError, FormatError, ValueError) as exc:
            return None, str(exc)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            loaded = list(pool.map(load, records))
    else:
        loaded = [load(r) for r in records]
    samples, skipped = [], []
    for rec, (trip, err) in zip(records, loaded):
        name = rec.color
        if trip is None:
            skipped.append((name, err))
            continue
        try:
            pred = predict(model, trip.color)
            samples.append((name, compute_metrics(pred, trip.depth, trip.mask)))
        except ValueError as exc:
            skipped.append((name, str(exc)))
    if out_csv is not None:
        write_metrics_csv(out_csv, samples)
    agg = aggregate(r for _, r in samples) if samples else None
    return EvalResult(agg, samples, skipped)


def format_record(rec: MetricsRecord) -> str:
    d = asdict(rec)
    return "  ".join(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}" for k, v in d.items())
