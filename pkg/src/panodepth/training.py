"""Multi-scale masked depth loss, Adam training and single-image prediction."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import DepthNet, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .renderer import ManifestRecord, manifest_dir, read_manifest, read_triplet
from .tensor import Tensor

LOG_FIELDS = ("step", "loss", "depth_term", "smooth_term", "seconds")
MIN_DEPTH = 1e-3


@dataclass(frozen=True)
class LossWeights:
    """Per-scale weights for the depth (alpha) and smoothness (beta) terms."""

    alpha: dict = field(default_factory=dict)
    beta: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(a < 0 for a in self.alpha.values()) or any(b < 0 for b in self.beta.values()):
            raise ValueError("loss weights must be non-negative")
        if not any(a > 0 for a in self.alpha.values()):
            raise ValueError("at least one depth weight must be positive")

    @classmethod
    def default(cls, scales) -> "LossWeights":
        """alpha = 1 at full resolution, halved per level; beta = alpha / 100."""
        alpha = {s: 1.0 / 2 ** int(np.log2(s)) for s in scales}
        return cls(alpha, {s: 0.01 * a for s, a in alpha.items()})


@dataclass
class TrainConfig:
    model: ModelSpec
    manifest: str
    out_dir: str = "run"
    batch_size: int = 8
    iterations: int = 2000
    lr: float = 2e-4
    seed: int = 0
    weights: LossWeights | None = None
    val_fraction: float = 0.1
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError(f"adam_eps must be positive, got {self.adam_eps}")


def downscale_gt(depth: np.ndarray, mask: np.ndarray, s: int, sentinel: float | None = None):
    """Average the valid pixels of each s x s block.

    Works on (..., H, W) arrays. A block is valid if any pixel in it is;
    invalid blocks carry ``sentinel`` (default: the largest input depth).
    """
    depth = np.asarray(depth)
    mask = np.asarray(mask)
    h, w = depth.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"scale {s} does not divide {h}x{w}")
    if s == 1:
        return depth.copy(), mask.copy()
    if sentinel is None:
        sentinel = float(depth.max())
    lead = depth.shape[:-2]
    m = (mask != 0).reshape(*lead, h // s, s, w // s, s)
    d = np.where(m, depth.reshape(m.shape), 0).astype(np.float64)
    count = m.sum(axis=(-3, -1))
    total = d.sum(axis=(-3, -1))
    valid = count > 0
    out = np.where(valid, total / np.maximum(count, 1), sentinel).astype(depth.dtype)
    return out, valid.astype(mask.dtype)


@dataclass
class LossResult:
    total: Tensor
    depth_term: float  # weighted sum over scales
    smooth_term: float
    empty: bool  # every mask was all zero; total is 0


def _masked_mean_sq(x: Tensor, weight: np.ndarray):
    """sum(weight * x^2) / count, or None when nothing contributes."""
    count = int(np.count_nonzero(weight))
    if count == 0:
        return None
    w = weight.astype(x.dtype)
    return T.scale(T.sum(T.mul(T.square(x), Tensor(w))), 1.0 / count)


def smoothness(pred: Tensor, mask: np.ndarray):
    """Mean squared forward difference of ``pred`` over pairs with both pixels valid.

    Horizontal differences wrap from the last column to the first.
    """
    m = mask != 0
    dx = T.sub(T.roll(pred, -1, 3), pred)
    wx = m & np.roll(m, -1, axis=-1)
    h = pred.shape[2]
    dy = T.sub(T.crop(pred, 2, 1, h), T.crop(pred, 2, 0, h - 1))
    wy = m[:, :, 1:] & m[:, :, :-1]
    count = int(np.count_nonzero(wx) + np.count_nonzero(wy))
    if count == 0:
        return None
    sx = T.sum(T.mul(T.square(dx), Tensor(wx.astype(pred.dtype))))
    sy = T.sum(T.mul(T.square(dy), Tensor(wy.astype(pred.dtype))))
    return T.scale(T.add(sx, sy), 1.0 / count)


def loss(preds: dict, gts: dict, masks: dict, weights: LossWeights) -> LossResult:
    """Sum over scales of alpha_s * depth term + beta_s * smoothness term.

    ``preds[s]`` are (N, 1, H/s, W/s) tensors; ``gts``/``masks`` matching
    arrays. Each term is a mean over contributing pixels only.
    """
    terms = []
    depth_total = smooth_total = 0.0
    for s, pred in preds.items():
        gt, mask = np.asarray(gts[s]), np.asarray(masks[s])
        if pred.shape != gt.shape or gt.shape != mask.shape:
            raise ValueError(f"scale {s}: prediction {pred.shape}, gt {gt.shape}, mask {mask.shape} differ")
        a, b = weights.alpha.get(s, 0.0), weights.beta.get(s, 0.0)
        if a > 0:
            d = _masked_mean_sq(T.sub(pred, Tensor(gt.astype(pred.dtype))), mask != 0)
            if d is not None:
                terms.append(T.scale(d, a))
                depth_total += a * d.item()
        if b > 0:
            sm = smoothness(pred, mask)
            if sm is not None:
                terms.append(T.scale(sm, b))
                smooth_total += b * sm.item()
    if not terms:
        ref = next(iter(preds.values()))
        zero = T.scale(T.sum(ref), 0.0)
        return LossResult(zero, 0.0, 0.0, True)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return LossResult(total, depth_total, smooth_total, False)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)


@dataclass
class Dataset:
    """Samples stacked in memory: color (N, 3, H, W), depth and mask (N, 1, H, W)."""

    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    records: list

    def __len__(self):
        return len(self.records)

    def targets(self, index, scales):
        d, m = self.depth[index], self.mask[index]
        out = {s: downscale_gt(d, m, s) for s in scales}
        return {s: v[0] for s, v in out.items()}, {s: v[1] for s, v in out.items()}


def load_dataset(manifest, records: list[ManifestRecord] | None = None) -> Dataset:
    root = manifest_dir(manifest)
    records = read_manifest(manifest) if records is None else records
    if not records:
        raise ValueError(f"{manifest}: no samples")
    colors, depths, masks = [], [], []
    for r in records:
        t = read_triplet(*(os.path.join(root, p) for p in (r.color, r.depth, r.mask)))
        colors.append(t.color.transpose(2, 0, 1))
        depths.append(t.depth[None])
        masks.append(t.mask[None])
    shapes = {c.shape for c in colors}
    if len(shapes) != 1:
        raise ValueError(f"{manifest}: samples have differing dims {sorted(shapes)}")
    return Dataset(np.stack(colors).astype(np.float32), np.stack(depths).astype(np.float32),
                   np.stack(masks).astype(np.uint8), list(records))


def split_by_scene(records, val_fraction: float = 0.1, seed: int = 0):
    """(train, val) record lists; whole scenes go to one side.

    floor(val_fraction * scenes) scenes, chosen by ``seed``, are held out.
    """
    scenes = sorted({r.scene_id for r in records})
    n_val = int(np.floor(val_fraction * len(scenes)))
    order = np.random.default_rng(seed).permutation(len(scenes))
    held = {scenes[i] for i in order[:n_val]}
    return [r for r in records if r.scene_id not in held], [r for r in records if r.scene_id in held]


def batch_order(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for one step: epochs are seeded permutations of the set."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    if batch_size >= n:
        return perm
    return perm[pos * batch_size:(pos + 1) * batch_size]


def masked_rmse(pred, gt, mask) -> float:
    m = np.asarray(mask) != 0
    if not m.any():
        raise ValueError("mask has no valid pixels")
    diff = np.asarray(pred, dtype=np.float64)[m] - np.asarray(gt, dtype=np.float64)[m]
    return float(np.sqrt(np.mean(diff * diff)))


@dataclass
class TrainResult:
    model: DepthNet
    checkpoint: str
    log: str
    rows: list
    train_records: list
    val_records: list


def _init_prediction_bias(model: DepthNet, data: Dataset):
    mean = float(data.depth[data.mask != 0].mean()) if data.mask.any() else 1.0
    for name in model.pred_nodes.values():
        model.params[f"{name}.bias"].data[:] = mean


def train(config: TrainConfig, log_fn=None) -> TrainResult:
    """Fit a freshly initialised model; writes ``model.ckpt`` and ``train_log.csv``.

    The run is a pure function of the config: the shuffle order and dropout
    streams derive from ``config.seed``.
    """
    records = read_manifest(config.manifest)
    train_recs, val_recs = split_by_scene(records, config.val_fraction, config.seed)
    data = load_dataset(config.manifest, train_recs)
    spec = config.model
    if data.color.shape[2:] != (spec.input_h, spec.input_w):
        raise ValueError(f"dataset dims {data.color.shape[2:]} do not match model input {spec.input_h}x{spec.input_w}")
    weights = config.weights or LossWeights.default(spec.scales)
    model = build_model(spec, seed=config.seed)
    _init_prediction_bias(model, data)
    opt = Adam(model.parameters(), lr=config.lr, eps=config.adam_eps)
    gts = {s: downscale_gt(data.depth, data.mask, s, spec.max_depth) for s in spec.scales}

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path, ckpt_path = out / "train_log.csv", out / "model.ckpt"
    rows = []
    start = time.perf_counter()
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for step in range(config.iterations):
            idx = batch_order(len(data), config.batch_size, config.seed, step)
            model.zero_grad()
            output = model(data.color[idx], train=True, seed=config.seed, step=step)
            res = loss(output.preds, {s: g[0][idx] for s, g in gts.items()},
                       {s: g[1][idx] for s, g in gts.items()}, weights)
            value = res.total.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at step {step}")
            if not res.empty:
                res.total.backward()
            opt.step()
            model.step = step + 1
            row = (step, value, res.depth_term, res.smooth_term, round(time.perf_counter() - start, 3))
            rows.append(row)
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
            if log_fn is not None:
                log_fn(row)
    save_checkpoint(model, ckpt_path)
    return TrainResult(model, str(ckpt_path), str(log_path), rows, train_recs, val_recs)


def predict(model, color: np.ndarray) -> np.ndarray:
    """Full-resolution depth for an (H, W, 3) color image in [0, 1].

    ``model`` is a DepthNet or a checkpoint path. Output is clamped to
    [MIN_DEPTH, max_depth].
    """
    if not isinstance(model, DepthNet):
        model = load_checkpoint(model)
    color = np.asarray(color)
    if color.dtype == np.uint8:
        color = color.astype(np.float32) / 255.0
    spec = model.spec
    if color.shape != (spec.input_h, spec.input_w, 3):
        raise ValueError(f"model expects a {spec.input_h}x{spec.input_w} RGB image, got {color.shape}")
    with T.no_grad():
        out = model(color.transpose(2, 0, 1)[None].astype(model.dtype)).depth.data[0, 0]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("prediction contains non-finite values")
    return np.clip(out, MIN_DEPTH, spec.max_depth).astype(np.float32)


def read_log(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_FIELDS:
            raise ValueError(f"{path}: unexpected log header {header}")
        return [(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in reader]
