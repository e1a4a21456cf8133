"""Overfit RectNet (width 8) on eight synthesized 64x128 samples.

Two generated rooms, four yaw rotations each. Prints the training RMSE and
a 50-step smoothed loss curve.

    python3 scripts/overfit.py --out runs/overfit --iterations 2000
"""
import argparse
import time

import numpy as np

from panodepth.geometry import SphereDims
from panodepth.models import ModelSpec
from panodepth.renderer import generated_scenes, render_dataset
from panodepth.training import TrainConfig, load_dataset, masked_rmse, predict, train


def run(out, iterations=2000, seed=0, batch_size=8, verbose=True, adam_eps=1e-8):
    dims = SphereDims(128, 64)
    render_dataset(generated_scenes(2, seed), dims, f"{out}/data")
    cfg = TrainConfig(ModelSpec("rectnet", 64, 128, 8), f"{out}/data/manifest.csv", out_dir=out,
                      batch_size=batch_size, iterations=iterations, seed=seed, adam_eps=adam_eps)
    log = (lambda r: print(f"step {r[0]:5d} loss {r[1]:.5f} ({r[4]:.0f}s)", flush=True) if r[0] % 100 == 0 else None)
    result = train(cfg, log if verbose else None)
    data = load_dataset(cfg.manifest)
    errs = [masked_rmse(predict(result.model, data.color[i].transpose(1, 2, 0)), data.depth[i, 0], data.mask[i, 0])
            for i in range(len(data))]
    pooled = float(np.sqrt(np.mean(np.square(errs))))
    return result, pooled


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--adam-eps", type=float, default=1e-8)
    args = ap.parse_args()
    t = time.perf_counter()
    result, rmse = run(args.out, args.iterations, args.seed, args.batch_size, adam_eps=args.adam_eps)
    losses = np.array([r[1] for r in result.rows])
    n = len(losses) // 50 * 50
    print("smoothed loss:", " ".join(f"{v:.4f}" for v in losses[:n].reshape(-1, 50).mean(1)))
    print(f"training RMSE {rmse:.4f} m after {args.iterations} iterations, {time.perf_counter() - t:.0f}s")


if __name__ == "__main__":
    main()
