"""Analytic scenes: primitives, a line-oriented text format, a procedural
room generator and vectorised ray/primitive intersection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-6
KINDS = ("room", "box", "sphere", "tri")
# number of geometric parameters per primitive keyword
_NGEOM = {"room": 6, "box": 6, "sphere": 4, "tri": 9}


class SceneError(ValueError):
    """Raised for malformed scene text or invariant violations."""


@dataclass(frozen=True)
class Primitive:
    kind: str
    params: tuple[float, ...]
    albedo: tuple[float, float, float]

    def validate(self):
        if self.kind not in KINDS:
            raise SceneError(f"unknown primitive kind {self.kind!r}")
        if len(self.params) != _NGEOM[self.kind]:
            raise SceneError(f"{self.kind} takes {_NGEOM[self.kind]} numbers, got {len(self.params)}")
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise SceneError(f"albedo {self.albedo} outside [0, 1]")
        p = self.params
        if self.kind in ("room", "box") and not all(p[i] < p[i + 3] for i in range(3)):
            raise SceneError(f"{self.kind} needs min < max on every axis: {p}")
        if self.kind == "sphere" and not p[3] > 0:
            raise SceneError(f"sphere radius must be positive, got {p[3]}")
        if self.kind == "tri":
            a, b, c = np.reshape(p, (3, 3))
            if np.linalg.norm(np.cross(b - a, c - a)) < 1e-12:
                raise SceneError(f"degenerate triangle {p}")

    def contains(self, point, margin: float = 0.0) -> bool:
        """Whether ``point`` lies inside a solid primitive (boxes, spheres)."""
        q = np.asarray(point, dtype=np.float64)
        p = self.params
        if self.kind == "box":
            return all(p[i] - margin <= q[i] <= p[i + 3] + margin for i in range(3))
        if self.kind == "sphere":
            return float(np.linalg.norm(q - np.asarray(p[:3]))) <= p[3] + margin
        return False


@dataclass(frozen=True)
class Scene:
    camera: tuple[float, float, float]
    primitives: tuple[Primitive, ...] = ()
    clear_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_depth: float = 1000.0

    def validate(self) -> "Scene":
        if not self.max_depth > 0:
            raise SceneError(f"maxdepth must be positive, got {self.max_depth}")
        if not all(0.0 <= c <= 1.0 for c in self.clear_color):
            raise SceneError(f"clear color {self.clear_color} outside [0, 1]")
        for prim in self.primitives:
            prim.validate()
            cam = self.camera
            if prim.kind == "room":
                p = prim.params
                if not all(p[i] < cam[i] < p[i + 3] for i in range(3)):
                    raise SceneError(f"camera {cam} is not strictly inside room {p}")
        return self

    def rotated(self, k: int) -> "Scene":
        """The scene turned ``k`` quarter turns about the camera's vertical axis.

        Uses exact component swaps, so axis-aligned geometry stays exact and
        renders as a column shift of the unrotated panorama.
        """
        c = np.asarray(self.camera, dtype=np.float64)

        def rot(pt):
            x, y, z = (np.asarray(pt, dtype=np.float64) - c)
            for _ in range(k % 4):
                x, y, z = z, y, -x
            return tuple(float(t) for t in (np.array([x, y, z]) + c))

        prims = []
        for prim in self.primitives:
            p = prim.params
            if prim.kind in ("room", "box"):
                lo, hi = np.array(rot(p[:3])), np.array(rot(p[3:]))
                params = tuple(np.minimum(lo, hi).tolist() + np.maximum(lo, hi).tolist())
            elif prim.kind == "sphere":
                params = rot(p[:3]) + (p[3],)
            else:
                params = rot(p[0:3]) + rot(p[3:6]) + rot(p[6:9])
            prims.append(Primitive(prim.kind, params, prim.albedo))
        return Scene(self.camera, tuple(prims), self.clear_color, self.max_depth)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_scene(scene: Scene) -> str:
    """Serialise to the text format accepted by :func:`parse_scene`."""
    lines = [
        "camera " + " ".join(_fmt(v) for v in scene.camera),
        "clear " + " ".join(_fmt(v) for v in scene.clear_color),
        "maxdepth " + _fmt(scene.max_depth),
    ]
    for prim in scene.primitives:
        geom = " ".join(_fmt(v) for v in prim.params)
        alb = " ".join(_fmt(v) for v in prim.albedo)
        lines.append(f"{prim.kind} {geom} albedo {alb}")
    return "\n".join(lines) + "\n"


def parse_scene(text: str) -> Scene:
    """Parse scene text; see the README for the grammar."""
    camera = None
    clear = (0.0, 0.0, 0.0)
    max_depth = 1000.0
    prims = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        try:
            nums = [float(t) for t in rest if t != "albedo"]
        except ValueError as exc:
            raise SceneError(f"line {lineno}: {exc}") from None
        if key == "camera":
            if len(rest) != 3:
                raise SceneError(f"line {lineno}: camera takes 3 numbers")
            camera = tuple(nums)
        elif key == "clear":
            if len(rest) != 3:
                raise SceneError(f"line {lineno}: clear takes 3 numbers")
            clear = tuple(nums)
        elif key == "maxdepth":
            if len(rest) != 1:
                raise SceneError(f"line {lineno}: maxdepth takes 1 number")
            max_depth = nums[0]
        elif key in _NGEOM:
            n = _NGEOM[key]
            if len(rest) != n + 4 or rest[n] != "albedo":
                raise SceneError(f"line {lineno}: expected '{key} <{n} numbers> albedo r g b'")
            prim = Primitive(key, tuple(nums[:n]), tuple(nums[n:]))
            try:
                prim.validate()
            except SceneError as exc:
                raise SceneError(f"line {lineno}: {exc}") from None
            prims.append(prim)
        else:
            raise SceneError(f"line {lineno}: unknown keyword {key!r}")
    if camera is None:
        raise SceneError("missing required keyword 'camera'")
    return Scene(camera, tuple(prims), clear, max_depth).validate()


@dataclass(frozen=True)
class RoomParams:
    """Ranges for :func:`generate_room`; extents are room half-sizes in meters."""
    half_x: tuple[float, float] = (1.5, 3.0)
    half_z: tuple[float, float] = (1.5, 3.0)
    floor_below: tuple[float, float] = (1.2, 1.6)
    ceiling_above: tuple[float, float] = (0.9, 1.4)
    objects: tuple[int, int] = (2, 5)
    clearance: float = 0.4
    max_depth: float = 20.0

    def check(self):
        for name in ("half_x", "half_z", "floor_below", "ceiling_above"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise SceneError(f"{name} range must satisfy 0 < lo <= hi, got {(lo, hi)}")
        lo, hi = self.objects
        if not 0 <= lo <= hi:
            raise SceneError(f"objects range must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.clearance < 0:
            raise SceneError("clearance must be non-negative")
        if min(self.half_x[0], self.half_z[0]) <= self.clearance and hi > 0:
            raise SceneError("room too small to place objects outside the camera clearance")
        if self.max_depth <= 0:
            raise SceneError("max_depth must be positive")


def _r(rng, lo, hi):
    return round(float(rng.uniform(lo, hi)), 3)


def _albedo(rng):
    return tuple(round(float(a), 3) for a in rng.uniform(0.2, 0.95, 3))


def generate_room(seed: int, params: RoomParams = RoomParams()) -> Scene:
    """Deterministic procedural room: a shell plus boxes and spheres.

    The camera sits at the room center (the origin); furniture keeps at least
    ``params.clearance`` meters away from it.
    """
    params.check()
    rng = np.random.default_rng(seed)
    hx = _r(rng, *params.half_x)
    hz = _r(rng, *params.half_z)
    below = _r(rng, *params.floor_below)
    above = _r(rng, *params.ceiling_above)
    room = Primitive("room", (-hx, -below, -hz, hx, above, hz), _albedo(rng))
    n = int(rng.integers(params.objects[0], params.objects[1] + 1))
    prims = [room]
    attempts = 0
    while len(prims) < n + 1:
        attempts += 1
        if attempts > 1000:
            raise SceneError(f"could not place {n} objects in room {room.params}")
        if rng.random() < 0.6:
            sx, sy, sz = _r(rng, 0.2, 0.8), _r(rng, 0.2, 1.0), _r(rng, 0.2, 0.8)
            x0 = _r(rng, -hx, hx - sx)
            z0 = _r(rng, -hz, hz - sz)
            y0 = -below
            prim = Primitive("box", (x0, y0, z0, round(x0 + sx, 3), round(y0 + sy, 3), round(z0 + sz, 3)), _albedo(rng))
        else:
            r = _r(rng, 0.15, 0.5)
            cx = _r(rng, -hx + r, hx - r) if hx > r else 0.0
            cz = _r(rng, -hz + r, hz - r) if hz > r else 0.0
            cy = _r(rng, -below + r, above - r) if below + above > 2 * r else 0.0
            prim = Primitive("sphere", (cx, cy, cz, r), _albedo(rng))
        try:
            prim.validate()
        except SceneError:
            continue
        if prim.contains((0.0, 0.0, 0.0), margin=params.clearance):
            continue
        prims.append(prim)
    return Scene((0.0, 0.0, 0.0), tuple(prims), (0.0, 0.0, 0.0), params.max_depth).validate()


@dataclass
class Hits:
    """Batched intersection result; ``index == -1`` marks a miss."""
    t: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    index: np.ndarray = field(default=None)

    @property
    def hit(self) -> np.ndarray:
        return self.index >= 0


def _slab(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    near = np.where(d == 0, np.where((o >= lo) & (o <= hi), -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(d == 0, np.where((o >= lo) & (o <= hi), np.inf, -np.inf), np.maximum(t1, t2))
    return near, far


def _hit_room(o, d, p):
    lo, hi = np.asarray(p[:3]), np.asarray(p[3:])
    _, far = _slab(o, d, lo, hi)
    axis = np.argmin(far, axis=-1)
    t = np.take_along_axis(far, axis[..., None], -1)[..., 0]
    normal = np.zeros(d.shape)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
    np.put_along_axis(normal, axis[..., None], sign[..., None], -1)
    return t, normal


def _hit_box(o, d, p):
    lo, hi = np.asarray(p[:3]), np.asarray(p[3:])
    near, far = _slab(o, d, lo, hi)
    axis = np.argmax(near, axis=-1)
    tn = np.take_along_axis(near, axis[..., None], -1)[..., 0]
    tf = np.min(far, axis=-1)
    t = np.where((tn <= tf) & (tn > EPS), tn, np.inf)
    normal = np.zeros(d.shape)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
    np.put_along_axis(normal, axis[..., None], sign[..., None], -1)
    return t, normal


def _hit_sphere(o, d, p):
    center, radius = np.asarray(p[:3]), p[3]
    oc = o - center
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > EPS, t0, np.where(t1 > EPS, t1, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    with np.errstate(invalid="ignore"):
        pts = o + t[..., None] * d
        normal = (pts - center) / radius
    return t, normal


def _hit_tri(o, d, p):
    a, b, c = (np.asarray(p[i:i + 3]) for i in (0, 3, 6))
    e1, e2 = b - a, c - a
    pv = np.cross(d, e2)
    det = pv @ e1
    tv = o - a
    qv = np.cross(tv, e1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        u = np.sum(tv * pv, axis=-1) * inv
        v = np.sum(d * qv, axis=-1) * inv
        t = (qv @ e2) * inv
    ok = (np.abs(det) > 1e-12) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > EPS)
    t = np.where(ok, t, np.inf)
    n = np.cross(e1, e2)
    normal = np.broadcast_to(n / np.linalg.norm(n), d.shape)
    return t, normal


_HIT = {"room": _hit_room, "box": _hit_box, "sphere": _hit_sphere, "tri": _hit_tri}


def intersect_many(origin, dirs: np.ndarray, scene: Scene) -> Hits:
    """Nearest hit along each row of ``dirs`` (..., 3) from a common origin.

    Search interval is (EPS, max_depth]; ties go to the lower primitive index.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    o = np.broadcast_to(np.asarray(origin, dtype=np.float64), dirs.shape)
    shape = dirs.shape[:-1]
    best_t = np.full(shape, np.inf)
    best_n = np.zeros(dirs.shape)
    best_a = np.zeros(dirs.shape)
    best_i = np.full(shape, -1, dtype=np.int64)
    for idx, prim in enumerate(scene.primitives):
        t, normal = _HIT[prim.kind](o, dirs, prim.params)
        closer = (t > EPS) & (t <= scene.max_depth) & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], normal, best_n)
        best_a = np.where(closer[..., None], np.asarray(prim.albedo), best_a)
        best_i = np.where(closer, idx, best_i)
    return Hits(best_t, best_n, best_a, best_i)


def intersect(origin, direction, scene: Scene):
    """Single-ray query; returns ``None`` on a miss, else a dict with
    ``t``, ``normal``, ``albedo`` and ``index``."""
    hits = intersect_many(origin, np.asarray(direction, dtype=np.float64)[None], scene)
    if hits.index[0] < 0:
        return None
    return {
        "t": float(hits.t[0]),
        "normal": hits.normal[0],
        "albedo": hits.albedo[0],
        "index": int(hits.index[0]),
    }
