"""Ray-cast color/depth/mask panoramas and write yaw-augmented datasets."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .geometry import SphereDims, direction_grid, yaw_rotate
from .scene import RoomParams, Scene, format_scene, generate_room, intersect_many

MANIFEST_FIELDS = ("color", "depth", "mask", "scene_id", "yaw_k")


@dataclass
class RenderTriplet:
    color: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32 meters; max_depth where mask == 0
    mask: np.ndarray   # (H, W) uint8 in {0, 1}

    def rotated(self, k: int) -> "RenderTriplet":
        return RenderTriplet(yaw_rotate(self.color, k), yaw_rotate(self.depth, k), yaw_rotate(self.mask, k))


@dataclass(frozen=True)
class ManifestRecord:
    color: str
    depth: str
    mask: str
    scene_id: str
    yaw_k: int


def _shade_rows(scene: Scene, dirs: np.ndarray):
    hits = intersect_many(scene.camera, dirs, scene)
    hit = hits.hit
    t = hits.t
    cos = np.abs(np.sum(hits.normal * dirs, axis=-1))
    with np.errstate(invalid="ignore", over="ignore"):
        shade = cos / (1.0 + t * t)
    color = np.where(hit[..., None], np.clip(hits.albedo * shade[..., None], 0.0, 1.0), np.asarray(scene.clear_color))
    depth = np.where(hit, t, scene.max_depth)
    return color, depth, hit


def render_panorama(scene: Scene, dims: SphereDims, jobs: int = 1) -> RenderTriplet:
    """One primary ray per pixel from the camera; depth is the hit distance.

    Color is ``albedo * |n . d| / (1 + t^2)`` (a point light at the camera).
    Misses get the clear color, ``max_depth`` and mask 0. Rows may be split
    across ``jobs`` threads; the result does not depend on the split.
    """
    dirs = direction_grid(dims)
    if jobs <= 1:
        color, depth, hit = _shade_rows(scene, dirs)
    else:
        bounds = np.linspace(0, dims.height, min(jobs, dims.height) + 1).astype(int)
        chunks = [dirs[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(lambda d: _shade_rows(scene, d), chunks))
        color, depth, hit = (np.concatenate(p) for p in zip(*parts))
    return RenderTriplet(color.astype(np.float32), depth.astype(np.float32), hit.astype(np.uint8))


def write_triplet(triplet: RenderTriplet, color_path, depth_path, mask_path):
    imageio.write_ppm(color_path, triplet.color)
    imageio.write_pfm(depth_path, triplet.depth)
    imageio.write_mask(mask_path, triplet.mask)


def read_triplet(color_path, depth_path, mask_path) -> RenderTriplet:
    color = imageio.read_ppm(color_path).astype(np.float32) / 255.0
    return RenderTriplet(color, imageio.read_pfm(depth_path), imageio.read_mask(mask_path))


def write_manifest(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.color, r.depth, r.mask, r.scene_id, r.yaw_k])


def read_manifest(path) -> list[ManifestRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}, got {reader.fieldnames}")
        return [ManifestRecord(row["color"], row["depth"], row["mask"], row["scene_id"], int(row["yaw_k"])) for row in reader]


def render_dataset(scenes, dims: SphereDims, out_dir, jobs: int = 1, manifest_name: str = "manifest.csv"):
    """Render each scene once and emit its four yaw rotations.

    ``scenes`` is a sequence of :class:`Scene` or ``(scene_id, Scene)`` pairs.
    Rotations k = 1..3 are exact column shifts of the k = 0 render. Returns
    the manifest records (paths relative to ``out_dir``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, item in enumerate(scenes):
        sid, scene = item if isinstance(item, tuple) else (f"scene{i:04d}", item)
        (out / f"{sid}.scene").write_text(format_scene(scene))
        base = render_panorama(scene, dims, jobs=jobs)
        for k in range(4):
            names = [f"{sid}_yaw{k}_color.ppm", f"{sid}_yaw{k}_depth.pfm", f"{sid}_yaw{k}_mask.pgm"]
            write_triplet(base.rotated(k), *(out / n for n in names))
            records.append(ManifestRecord(*names, sid, k))
    write_manifest(out / manifest_name, records)
    return records


def generated_scenes(count: int, seed: int, params: RoomParams = RoomParams()):
    """``(scene_id, Scene)`` pairs; scene i uses seed ``seed * 100003 + i``."""
    return [(f"scene{i:04d}", generate_room(seed * 100003 + i, params)) for i in range(count)]


def manifest_dir(manifest_path) -> str:
    return os.path.dirname(os.path.abspath(manifest_path))
