"""Equirectangular pixel <-> sphere mappings, yaw rotation and cubemaps.

Conventions (declared, not inferred):

* pixel centers sit at ``(u + 0.5, v + 0.5)``;
* longitude ``phi = 2*pi*(u + 0.5)/W - pi``, latitude ``theta = pi/2 - pi*(v + 0.5)/H``;
* ``d = (cos(theta) sin(phi), sin(theta), cos(theta) cos(phi))`` with y up.

Images are numpy arrays laid out ``(H, W)`` or ``(H, W, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FACE_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")


@dataclass(frozen=True)
class SphereDims:
    width: int
    height: int

    def __post_init__(self):
        if self.height < 1 or self.width != 2 * self.height:
            raise ValueError(f"equirect dims must satisfy width = 2*height, got {self.width}x{self.height}")
        if self.width % 4:
            raise ValueError(f"equirect width must be divisible by 4, got {self.width}")

    @classmethod
    def from_width(cls, width: int) -> "SphereDims":
        return cls(width, width // 2)

    @classmethod
    def of(cls, img: np.ndarray) -> "SphereDims":
        return cls(img.shape[1], img.shape[0])


def _rotate_quarter(x, y, z, q):
    """Apply the exact yaw rotation (x, y, z) -> (z, y, -x) ``q`` times."""
    q %= 4
    if q == 0:
        return x, y, z
    if q == 1:
        return z, y, -x
    if q == 2:
        return -x, y, -z
    return -z, y, x


def _directions(u, v, dims: SphereDims):
    # Longitudes are evaluated in the first quarter only and rotated by exact
    # component swaps, so column shifts of W/4 map to bit-exact rotations.
    quarter = dims.width // 4
    q, u0 = np.divmod(u, quarter)
    phi = 2.0 * np.pi * (u0 + 0.5) / dims.width - np.pi
    theta = np.pi / 2 - np.pi * (v + 0.5) / dims.height
    ct = np.cos(theta)
    x0, y0, z0 = ct * np.sin(phi), np.sin(theta), ct * np.cos(phi)
    x0, y0, z0 = np.broadcast_arrays(x0, y0, z0)
    q = np.broadcast_to(q, x0.shape)
    out = np.empty(x0.shape + (3,))
    for k in range(4):
        sel = q == k
        if np.any(sel):
            rx, ry, rz = _rotate_quarter(x0[sel], y0[sel], z0[sel], k)
            out[sel, 0], out[sel, 1], out[sel, 2] = rx, ry, rz
    return out


def pixel_to_direction(u: int, v: int, dims: SphereDims) -> np.ndarray:
    """Unit direction through the center of integer pixel ``(u, v)``."""
    if not (0 <= u < dims.width and 0 <= v < dims.height):
        raise ValueError(f"pixel ({u}, {v}) outside {dims.width}x{dims.height}")
    return _directions(np.array([u]), np.array([v]), dims)[0]


def direction_grid(dims: SphereDims) -> np.ndarray:
    """(H, W, 3) array of ray directions for every pixel."""
    v, u = np.meshgrid(np.arange(dims.height), np.arange(dims.width), indexing="ij")
    return _directions(u, v, dims)


def direction_to_pixel(d, dims: SphereDims):
    """Continuous pixel coordinates ``(u, v)`` of direction(s) ``d``.

    ``d`` may be a single 3-vector or an array ``(..., 3)``; it need not be
    normalised. Latitude is not clamped: the north pole maps to ``v = -0.5``.
    """
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(norm == 0):
        raise ValueError("zero-length direction has no pixel")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    phi = np.arctan2(x, z)
    phi = np.where(phi >= np.pi, phi - 2 * np.pi, phi)
    theta = np.arcsin(np.clip(y / norm, -1.0, 1.0))
    u = (phi + np.pi) * dims.width / (2 * np.pi) - 0.5
    v = (np.pi / 2 - theta) * dims.height / np.pi - 0.5
    return u, v


def spherical_coords(u, v, dims: SphereDims):
    """(longitude, latitude) in radians of pixel centers."""
    phi = 2.0 * np.pi * (np.asarray(u) + 0.5) / dims.width - np.pi
    theta = np.pi / 2 - np.pi * (np.asarray(v) + 0.5) / dims.height
    return phi, theta


def latitude_weight(v, height: int):
    """cos(latitude) of row ``v``: relative solid angle of a pixel in that row."""
    v_arr = np.asarray(v)
    if np.any(v_arr < 0) or np.any(v_arr >= height):
        raise ValueError(f"row {v} outside image of height {height}")
    return np.cos(np.pi / 2 - np.pi * (v_arr + 0.5) / height)


def yaw_rotate(img: np.ndarray, k: int, axis: int = 1) -> np.ndarray:
    """Rotate a panorama by ``k`` quarter turns about the vertical axis.

    Realised as a circular shift of ``k * W / 4`` columns to the right along
    ``axis`` (the width axis; use ``axis=-1`` for NCHW arrays).
    """
    if k not in (0, 1, 2, 3):
        raise ValueError(f"quarter turns must be in 0..3, got {k}")
    width = img.shape[axis]
    if width % 4:
        raise ValueError(f"width {width} is not divisible by 4")
    return np.roll(img, k * width // 4, axis=axis)


def _lerp(a, b, t):
    # a + (b - a) t keeps constant inputs exact.
    return a + (b - a) * t


def sample_equirect(img: np.ndarray, u, v) -> np.ndarray:
    """Bilinear lookup at continuous pixel coords, wrapping u and clamping v."""
    h, w = img.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1)
    u0 = np.floor(u)
    v0 = np.minimum(np.floor(v), h - 2) if h > 1 else np.zeros_like(v)
    fu, fv = u - u0, v - v0
    u0 = u0.astype(np.int64) % w
    u1 = (u0 + 1) % w
    v0 = v0.astype(np.int64)
    v1 = np.minimum(v0 + 1, h - 1)
    if img.ndim == 3:
        fu, fv = fu[..., None], fv[..., None]
    top = _lerp(img[v0, u0], img[v0, u1], fu)
    bot = _lerp(img[v1, u0], img[v1, u1], fu)
    return _lerp(top, bot, fv)


def _cast_like(values: np.ndarray, dtype) -> np.ndarray:
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        return np.clip(np.rint(values), info.min, info.max).astype(dtype)
    return values.astype(dtype, copy=False)


def _face_directions(face: int, a, b):
    """Directions (unnormalised) for face coords a (right) and b (down) in [-1, 1]."""
    one = np.ones_like(a)
    if face == 0:
        return np.stack([one, -b, -a], -1)
    if face == 1:
        return np.stack([-one, -b, a], -1)
    if face == 2:
        return np.stack([a, one, b], -1)
    if face == 3:
        return np.stack([a, -one, -b], -1)
    if face == 4:
        return np.stack([a, -b, one], -1)
    return np.stack([-a, -b, -one], -1)


def equirect_to_cubemap(img: np.ndarray, face_size: int) -> list[np.ndarray]:
    """Resample a panorama onto six cube faces ordered (+x, -x, +y, -y, +z, -z)."""
    if face_size < 1:
        raise ValueError("face_size must be >= 1")
    dims = SphereDims.of(img)
    src = img.astype(np.float64, copy=False)
    i, j = np.meshgrid(np.arange(face_size), np.arange(face_size), indexing="ij")
    a = 2.0 * (j + 0.5) / face_size - 1.0
    b = 2.0 * (i + 0.5) / face_size - 1.0
    faces = []
    for f in range(6):
        u, v = direction_to_pixel(_face_directions(f, a, b), dims)
        faces.append(_cast_like(sample_equirect(src, u, v), img.dtype))
    return faces


def _face_coords(d):
    """Face index and (a, b) coordinates for directions ``d`` (..., 3)."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
    face = np.where(
        (ax >= ay) & (ax >= az),
        np.where(x > 0, 0, 1),
        np.where(ay >= az, np.where(y > 0, 2, 3), np.where(z > 0, 4, 5)),
    )
    a = np.empty_like(x)
    b = np.empty_like(x)
    # Invert _face_directions per face.
    for f, (ma, mb) in enumerate([
        (lambda: -z / ax, lambda: -y / ax),
        (lambda: z / ax, lambda: -y / ax),
        (lambda: x / ay, lambda: z / ay),
        (lambda: x / ay, lambda: -z / ay),
        (lambda: x / az, lambda: -y / az),
        (lambda: -x / az, lambda: -y / az),
    ]):
        sel = face == f
        if np.any(sel):
            with np.errstate(divide="ignore", invalid="ignore"):
                a[sel] = ma()[sel]
                b[sel] = mb()[sel]
    return face, a, b


def cubemap_to_equirect(faces, dims: SphereDims) -> np.ndarray:
    """Back-project six faces (+x, -x, +y, -y, +z, -z) onto an equirect raster."""
    if len(faces) != 6:
        raise ValueError(f"expected 6 faces, got {len(faces)}")
    size = faces[0].shape[0]
    stack = np.stack(faces).astype(np.float64, copy=False)
    face, a, b = _face_coords(direction_grid(dims))
    # Continuous face pixel coords, clamped to the face interior.
    fj = np.clip((a + 1.0) * size / 2 - 0.5, 0.0, size - 1)
    fi = np.clip((b + 1.0) * size / 2 - 0.5, 0.0, size - 1)
    j0 = np.minimum(np.floor(fj), max(size - 2, 0)).astype(np.int64)
    i0 = np.minimum(np.floor(fi), max(size - 2, 0)).astype(np.int64)
    tj, ti = fj - j0, fi - i0
    j1 = np.minimum(j0 + 1, size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    if stack.ndim == 4:
        tj, ti = tj[..., None], ti[..., None]
    top = _lerp(stack[face, i0, j0], stack[face, i0, j1], tj)
    bot = _lerp(stack[face, i1, j0], stack[face, i1, j1], tj)
    return _cast_like(_lerp(top, bot, ti), faces[0].dtype)


def rotation_about_y(k: int) -> np.ndarray:
    """3x3 matrix of ``k`` exact quarter turns matching :func:`yaw_rotate`."""
    cols = [_rotate_quarter(*e, k) for e in np.eye(3)]
    return np.array(cols, dtype=np.float64).T


__all__ = [
    "FACE_NAMES", "SphereDims", "pixel_to_direction", "direction_grid", "direction_to_pixel",
    "spherical_coords", "latitude_weight", "yaw_rotate", "sample_equirect",
    "equirect_to_cubemap", "cubemap_to_equirect", "rotation_about_y",
]
