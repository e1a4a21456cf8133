"""Render one generated room and write its panorama, depth preview and cube faces.

    python3 scripts/render_demo.py --seed 3 --width 512 --out runs/demo
"""
import argparse
from pathlib import Path

import numpy as np

from panodepth import imageio
from panodepth.geometry import SphereDims, equirect_to_cubemap
from panodepth.renderer import render_panorama, write_triplet
from panodepth.scene import format_scene, generate_room

FACES = ("px", "nx", "py", "ny", "pz", "nz")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width", type=int, default=512)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/demo")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_room(args.seed)
    (out / "room.scene").write_text(format_scene(scene))
    tri = render_panorama(scene, SphereDims.from_width(args.width), jobs=args.jobs)
    write_triplet(tri, out / "color.ppm", out / "depth.pfm", out / "mask.pgm")

    # near is bright, far is dark
    valid = tri.depth[tri.mask == 1]
    lo, hi = valid.min(), valid.max()
    preview = np.where(tri.mask == 1, 1.0 - (tri.depth - lo) / max(hi - lo, 1e-6), 0.0)
    imageio.write_pgm(out / "depth_preview.pgm", np.round(255 * preview).astype(np.uint8))
    for tag, face in zip(FACES, equirect_to_cubemap(tri.color, args.width // 4)):
        imageio.write_ppm(out / f"face_{tag}.ppm", face)
    print(f"depth {lo:.2f}..{hi:.2f} m, {int(tri.mask.sum())}/{tri.mask.size} valid pixels; wrote {out}")


if __name__ == "__main__":
    main()
