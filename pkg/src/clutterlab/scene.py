"""2.5-D tabletop world: rigid blocks on a plane, quasi-static pushing, removal
and top-down orthographic RGB-D rendering.

Objects are described by a convex footprint and a top surface height profile.
Scenes are immutable values; every operation returns a new ``Scene``.
"""
from __future__ import annotations

import functools
import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_WORKSPACE = (0.0, 0.8, 0.0, 0.6)
PIXEL_SIZE = 0.00125
PUSHER_RADIUS = 0.01
CONTACT_TOL = 0.001
TABLE_GRAY = 0.5
COLOR_NOISE = 0.01
CYLINDER_SIDES = 32
MAX_PLACEMENT_ATTEMPTS = 1000
SHAPES = ("box", "cylinder")
PATTERNS = ("random", "gathering", "covering", "tilting")


class SceneError(ValueError):
    """Invalid scene or scene operation."""


class WorkspaceCapacityError(SceneError):
    pass


class NoObjectError(SceneError):
    pass


class OutOfWorkspaceError(SceneError):
    pass


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    center: tuple[float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0
    tilt: float = 0.0
    tilt_axis: float = 0.0
    color: tuple[float, float, float] = (0.8, 0.3, 0.3)
    # id of the object this one leans on (covering); None when on the table
    support: int | None = None

    @property
    def height(self) -> float:
        return self.dims[2]

    def footprint(self) -> np.ndarray:
        """Counter-clockwise footprint vertices, shape (k, 2)."""
        return _footprint(self.shape, self.center, self.dims, self.yaw)

    def ascent(self) -> np.ndarray:
        """Unit vector of steepest ascent of the top surface."""
        return np.array([-math.sin(self.tilt_axis), math.cos(self.tilt_axis)])

    def top_height(self, xy: np.ndarray) -> np.ndarray:
        """Top-surface height at world points ``xy`` (..., 2), ignoring containment.

        A tilted top is a plane rising from ``h*cos(tilt)`` at the low footprint
        edge along :meth:`ascent`.
        """
        h = self.height
        if self.tilt == 0.0:
            return np.full(xy.shape[:-1], h)
        a = self.ascent()
        c = np.asarray(self.center)
        low = float(np.min((self.footprint() - c) @ a))
        s = (xy - c) @ a - low
        return h * math.cos(self.tilt) + s * math.tan(self.tilt)

    def height_range(self) -> tuple[float, float]:
        z = self.top_height(self.footprint())
        return float(z.min()), float(z.max())


def _footprint(shape, center, dims, yaw) -> np.ndarray:
    cx, cy = center
    if shape == "box":
        hl, hw = dims[0] / 2.0, dims[1] / 2.0
        local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
    elif shape == "cylinder":
        r = dims[0] / 2.0
        ang = 2.0 * np.pi * np.arange(CYLINDER_SIDES) / CYLINDER_SIDES
        local = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    else:
        raise SceneError(f"unknown shape {shape!r}")
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...] = ()
    workspace: tuple[float, float, float, float] = DEFAULT_WORKSPACE
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "workspace", tuple(float(v) for v in self.workspace))

    def __len__(self) -> int:
        return len(self.objects)

    def get(self, obj_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(obj_id)

    def ids(self) -> list[int]:
        return [o.id for o in self.objects]

    def with_objects(self, objects: Iterable[SceneObject]) -> "Scene":
        return replace(self, objects=tuple(objects))

    def validate(self) -> None:
        """Raise :class:`SceneError` if any invariant is violated."""
        x0, x1, y0, y1 = self.workspace
        if not (x1 > x0 and y1 > y0):
            raise SceneError(f"degenerate workspace {self.workspace}")
        ids = self.ids()
        if len(set(ids)) != len(ids):
            raise SceneError("object ids are not unique")
        eps = 1e-9
        for o in self.objects:
            l, w, h = o.dims
            if o.shape not in SHAPES:
                raise SceneError(f"object {o.id}: unknown shape {o.shape!r}")
            if not (l > 0 and w > 0 and h > 0):
                raise SceneError(f"object {o.id}: dims must be positive, got {o.dims}")
            if not (0.0 <= o.tilt < math.pi / 2):
                raise SceneError(f"object {o.id}: tilt {o.tilt} outside [0, pi/2)")
            if any(not 0.0 <= c <= 1.0 for c in o.color):
                raise SceneError(f"object {o.id}: color outside [0,1]")
            fp = o.footprint()
            if (fp[:, 0].min() < x0 - eps or fp[:, 0].max() > x1 + eps
                    or fp[:, 1].min() < y0 - eps or fp[:, 1].max() > y1 + eps):
                raise SceneError(f"object {o.id}: footprint leaves the workspace")
            if o.support is not None and o.support not in ids:
                raise SceneError(f"object {o.id}: unknown support {o.support}")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                if a.support == b.id or b.support == a.id:
                    continue
                pen = penetration(a.footprint(), b.footprint())
                if pen > CONTACT_TOL + 1e-9:
                    raise SceneError(
                        f"objects {a.id} and {b.id} interpenetrate by {pen * 1e3:.2f} mm")


# ---------------------------------------------------------------------------
# convex polygon helpers (separating axis theorem)

def _axes(poly: np.ndarray) -> np.ndarray:
    edges = np.roll(poly, -1, axis=0) - poly
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def penetration(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum-axis overlap of two convex polygons; <= 0 when separated."""
    axes = np.concatenate([_axes(a), _axes(b)])
    pa, pb = a @ axes.T, b @ axes.T
    overlap = np.minimum(pa.max(0), pb.max(0)) - np.maximum(pa.min(0), pb.min(0))
    return float(overlap.min())


def separation(a: np.ndarray, b: np.ndarray) -> float:
    """Largest gap between projections over the SAT axes (a lower bound on distance)."""
    return -penetration(a, b)


def sweep(static: np.ndarray, moving: np.ndarray, u: np.ndarray) -> tuple[float, float]:
    """Interval of t for which ``moving + t*u`` overlaps ``static``.

    Returns ``(t_in, t_out)``; the polygons intersect iff ``t_in < t_out``.
    """
    axes = np.concatenate([_axes(static), _axes(moving)])
    ps, pm = static @ axes.T, moving @ axes.T
    s_min, s_max = ps.min(0), ps.max(0)
    m_min, m_max = pm.min(0), pm.max(0)
    v = axes @ u
    t_in, t_out = -math.inf, math.inf
    for k in range(len(axes)):
        if abs(v[k]) < 1e-12:
            if m_max[k] <= s_min[k] or m_min[k] >= s_max[k]:
                return math.inf, -math.inf
            continue
        lo = (s_min[k] - m_max[k]) / v[k]
        hi = (s_max[k] - m_min[k]) / v[k]
        if lo > hi:
            lo, hi = hi, lo
        t_in = max(t_in, lo)
        t_out = min(t_out, hi)
    return t_in, t_out


def _disc(center, radius: float, sides: int = 24) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(sides) / sides
    # circumscribed polygon so contact is never missed
    r = radius / math.cos(math.pi / sides)
    return np.stack([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)], axis=1)


def _point_in_poly(poly: np.ndarray, xy: np.ndarray) -> np.ndarray:
    inside = np.ones(xy.shape[:-1], dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    for p, q in zip(poly, nxt):
        ex, ey = q - p
        inside &= (ex * (xy[..., 1] - p[1]) - ey * (xy[..., 0] - p[0])) >= 0.0
    return inside


def direction(index: int) -> np.ndarray:
    """Unit push direction O_i = i*45 degrees in the workspace frame."""
    if not 0 <= index < 8:
        raise SceneError(f"direction index {index} outside 0..7")
    ang = math.radians(45.0 * index)
    return np.array([math.cos(ang), math.sin(ang)])


# ---------------------------------------------------------------------------
# image geometry

@dataclass(frozen=True)
class ImageMeta:
    pixel_size: float = PIXEL_SIZE
    origin: tuple[float, float] = (DEFAULT_WORKSPACE[0], DEFAULT_WORKSPACE[2])
    height: int = 480
    width: int = 640

    @classmethod
    def for_workspace(cls, workspace, pixel_size: float = PIXEL_SIZE) -> "ImageMeta":
        x0, x1, y0, y1 = workspace
        return cls(pixel_size, (x0, y0),
                   int(round((y1 - y0) / pixel_size)), int(round((x1 - x0) / pixel_size)))

    def to_dict(self) -> dict:
        return {"pixel_size": self.pixel_size, "origin": list(self.origin),
                "height": self.height, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageMeta":
        return cls(float(d["pixel_size"]), tuple(d["origin"]), int(d["height"]), int(d["width"]))


def pixel_to_world(meta: ImageMeta, pixel) -> tuple[float, float]:
    """Center of pixel ``(row, col)`` in workspace coordinates."""
    r, c = pixel
    if not (0 <= r < meta.height and 0 <= c < meta.width):
        raise OutOfWorkspaceError(f"pixel {pixel} outside {meta.height}x{meta.width} image")
    return (meta.origin[0] + (c + 0.5) * meta.pixel_size,
            meta.origin[1] + (r + 0.5) * meta.pixel_size)


def world_to_pixel(meta: ImageMeta, point) -> tuple[int, int]:
    """Pixel ``(row, col)`` containing world point ``(x, y)``."""
    x, y = point
    c = math.floor((x - meta.origin[0]) / meta.pixel_size)
    r = math.floor((y - meta.origin[1]) / meta.pixel_size)
    # the far workspace edge belongs to the last pixel
    x_end = meta.origin[0] + meta.width * meta.pixel_size
    y_end = meta.origin[1] + meta.height * meta.pixel_size
    if c == meta.width and math.isclose(x, x_end, abs_tol=1e-12):
        c -= 1
    if r == meta.height and math.isclose(y, y_end, abs_tol=1e-12):
        r -= 1
    if not (0 <= r < meta.height and 0 <= c < meta.width):
        raise OutOfWorkspaceError(f"point {point} outside the workspace")
    return int(r), int(c)


@dataclass
class RgbdImage:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters above the table
    meta: ImageMeta = field(default_factory=ImageMeta)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@functools.lru_cache(maxsize=8)
def _color_noise(seed: int, height: int, width: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-COLOR_NOISE, COLOR_NOISE, size=(height, width, 3))
    noise.setflags(write=False)
    return noise


def render(scene: Scene, meta: ImageMeta | None = None) -> RgbdImage:
    """Orthographic top-down color + depth render (z-buffered on top height)."""
    meta = meta or ImageMeta.for_workspace(scene.workspace)
    H, W, ps = meta.height, meta.width, meta.pixel_size
    depth = np.zeros((H, W))
    color = np.full((H, W, 3), TABLE_GRAY)
    owner = np.full((H, W), -1)
    for k, o in enumerate(scene.objects):
        fp = o.footprint()
        c0 = max(int(math.floor((fp[:, 0].min() - meta.origin[0]) / ps)), 0)
        c1 = min(int(math.ceil((fp[:, 0].max() - meta.origin[0]) / ps)), W)
        r0 = max(int(math.floor((fp[:, 1].min() - meta.origin[1]) / ps)), 0)
        r1 = min(int(math.ceil((fp[:, 1].max() - meta.origin[1]) / ps)), H)
        if r1 <= r0 or c1 <= c0:
            continue
        xs = meta.origin[0] + (np.arange(c0, c1) + 0.5) * ps
        ys = meta.origin[1] + (np.arange(r0, r1) + 0.5) * ps
        xy = np.stack(np.meshgrid(xs, ys), axis=-1)
        inside = _point_in_poly(fp, xy)
        z = o.top_height(xy)
        win = depth[r0:r1, c0:c1]
        upd = inside & (z > win)
        win[upd] = z[upd]
        owner[r0:r1, c0:c1][upd] = k
    noise = _color_noise(scene.rng_seed, H, W)
    covered = owner >= 0
    if covered.any():
        palette = np.array([o.color for o in scene.objects])
        color[covered] = np.clip(palette[owner[covered]] + noise[covered], 0.0, 1.0)
    return RgbdImage(color, depth, meta)


# ---------------------------------------------------------------------------
# dynamics

def _wall_limit(fp: np.ndarray, u: np.ndarray, workspace) -> float:
    x0, x1, y0, y1 = workspace
    lim = math.inf
    for k, (lo, hi) in enumerate(((x0, x1), (y0, y1))):
        if u[k] > 1e-12:
            lim = min(lim, float(((hi - fp[:, k]) / u[k]).min()))
        elif u[k] < -1e-12:
            lim = min(lim, float(((lo - fp[:, k]) / u[k]).min()))
    return max(lim, 0.0)


def _linked(a: SceneObject, b: SceneObject) -> bool:
    return a.support == b.id or b.support == a.id


def _chain_shifts(objs: Sequence[SceneObject], mover: int, want: float,
                  u: np.ndarray, workspace) -> list[float]:
    """Quasi-static translation of ``objs[mover]`` by up to ``want`` along ``u``.

    Downstream bodies are projected out of penetration along ``u``. The gap
    graph gives each body its push delay; the shared travel is cut so that no
    body passes a wall.
    """
    n = len(objs)
    fps = [o.footprint() for o in objs]
    dist = [math.inf] * n
    dist[mover] = 0.0
    heap = [(0.0, mover)]
    while heap:
        d, i = heapq.heappop(heap)
        if d > dist[i] or d >= want:
            continue
        for j in range(n):
            if j == i or _linked(objs[i], objs[j]):
                continue
            t_in, t_out = sweep(fps[j], fps[i], u)
            if t_in >= t_out or t_out <= 1e-12:
                continue
            nd = d + max(t_in, 0.0)
            if nd < dist[j]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    travel = want
    for j in range(n):
        if dist[j] < want:
            travel = min(travel, _wall_limit(fps[j], u, workspace) + dist[j])
    return [max(0.0, travel - d) for d in dist]


def _translate(o: SceneObject, delta: np.ndarray) -> SceneObject:
    return replace(o, center=(o.center[0] + float(delta[0]), o.center[1] + float(delta[1])))


def _settle(o: SceneObject, support: SceneObject | None) -> SceneObject:
    """Re-derive the lean of ``o`` on ``support``; drops it to the table if unsupported."""
    if support is None:
        return replace(o, tilt=0.0, support=None)
    fp_o, fp_s = o.footprint(), support.footprint()
    if penetration(fp_o, fp_s) <= CONTACT_TOL:
        return replace(o, tilt=0.0, support=None)
    a = o.ascent()
    low = float(np.min(fp_o @ a))
    s_c = float(np.min(fp_s @ a)) - low
    if s_c <= CONTACT_TOL:
        return replace(o, tilt=0.0, support=None)
    tilt = math.atan2(support.height, s_c)
    if tilt >= math.radians(75.0):
        return replace(o, tilt=0.0, support=None)
    return replace(o, tilt=tilt)


def _resolve_dropped(objs: list[SceneObject], k: int, u: np.ndarray, workspace) -> None:
    """Push bodies out of a freshly dropped object ``objs[k]`` along ``u``."""
    fp_k = objs[k].footprint()
    need = 0.0
    for j, o in enumerate(objs):
        if j == k or _linked(o, objs[k]):
            continue
        if penetration(fp_k, o.footprint()) > CONTACT_TOL:
            t_in, t_out = sweep(fp_k, o.footprint(), u)
            need = max(need, t_out)
    if need <= 0.0:
        return
    # the dropped body acts as a pusher for its neighbours
    for j, o in enumerate(objs):
        if j == k or _linked(o, objs[k]):
            continue
        if penetration(fp_k, o.footprint()) > CONTACT_TOL:
            t_in, t_out = sweep(fp_k, o.footprint(), u)
            shifts = _chain_shifts(objs, j, t_out, u, workspace)
            for m, s in enumerate(shifts):
                if s > 0.0 and m != k:
                    objs[m] = _translate(objs[m], s * u)


def apply_push(scene: Scene, start, direction_index: int, distance: float) -> Scene:
    """Sweep a circular finger from ``start`` along O_i for ``distance`` meters.

    The first body touched translates with the finger; bodies ahead of it are
    shoved along the same direction; walls stop the whole chain. A push that
    touches nothing returns ``scene`` itself.
    """
    if distance <= 0:
        raise SceneError("push distance must be positive")
    x0, x1, y0, y1 = scene.workspace
    if not (x0 <= start[0] <= x1 and y0 <= start[1] <= y1):
        raise OutOfWorkspaceError(f"push start {start} outside the workspace")
    u = direction(direction_index)
    finger = _disc(start, PUSHER_RADIUS)
    objs = list(scene.objects)
    best, best_key = None, None
    for k, o in enumerate(objs):
        t_in, t_out = sweep(o.footprint(), finger, u)
        if t_in >= t_out or t_out <= 0.0 or t_in > distance:
            continue
        # ties (finger already overlapping): prefer the body it moves into
        key = (max(t_in, 0.0), -t_out, -o.height_range()[1], o.id)
        if best_key is None or key < best_key:
            best, best_key = k, key
    if best is None:
        return scene
    want = distance - best_key[0]
    shifts = _chain_shifts(objs, best, want, u, scene.workspace)
    moved = {objs[k].id for k, s in enumerate(shifts) if s > 1e-12}
    if not moved:
        return scene
    objs = [_translate(o, s * u) if s > 0.0 else o for o, s in zip(objs, shifts)]
    by_id = {o.id: o for o in objs}
    for k, o in enumerate(objs):
        if o.tilt == 0.0 and o.support is None:
            continue
        if o.support is None:
            # a free-leaning body shoved from its raised side falls flat;
            # shoved at its foot or sideways it slides on its edge
            if o.id in moved and float(np.dot(u, o.ascent())) < -0.9:
                objs[k] = replace(o, tilt=0.0)
            continue
        if o.id in moved or o.support in moved:
            settled = _settle(o, by_id[o.support])
            objs[k] = settled
            if settled.support is None:
                by_id[o.id] = settled
                _resolve_dropped(objs, k, u, scene.workspace)
    return scene.with_objects(objs)


def topmost_at(scene: Scene, at) -> SceneObject:
    """Highest object whose footprint contains world point ``at``."""
    xy = np.asarray(at, dtype=float)
    best, best_z = None, -math.inf
    for o in scene.objects:
        if _point_in_poly(o.footprint(), xy[None])[0]:
            z = float(o.top_height(xy[None])[0])
            if z > best_z:
                best, best_z = o, z
    if best is None:
        raise NoObjectError(f"no object at {tuple(at)}")
    return best


def remove_object(scene: Scene, at) -> Scene:
    """Delete the topmost object at ``at``; bodies leaning on it drop flat."""
    gone = topmost_at(scene, at)
    objs = []
    for o in scene.objects:
        if o.id == gone.id:
            continue
        if o.support == gone.id:
            o = replace(o, tilt=0.0, support=None)
        objs.append(o)
    return scene.with_objects(objs)


# ---------------------------------------------------------------------------
# scene generation

BLOCK_SIDE = (0.045, 0.065)
BLOCK_HEIGHT = (0.02, 0.05)
PLATE_HEIGHT = (0.003, 0.005)
TILT_RANGE = (math.radians(40.0), math.radians(55.0))
RANDOM_CLEARANCE = 0.02


class _Placer:
    def __init__(self, workspace, rng: np.random.Generator, clearance: float):
        self.workspace = workspace
        self.rng = rng
        self.clearance = clearance
        self.objects: list[SceneObject] = []
        self.attempts = 0

    def next_id(self) -> int:
        return len(self.objects)

    def color(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.rng.uniform(0.15, 0.95, size=3))

    def dims(self, height=None) -> tuple[float, float, float]:
        l, w = self.rng.uniform(*BLOCK_SIDE, size=2)
        h = self.rng.uniform(*BLOCK_HEIGHT) if height is None else height
        return (float(l), float(w), float(h))

    def center(self, dims) -> tuple[float, float]:
        x0, x1, y0, y1 = self.workspace
        m = 0.5 * max(dims[0], dims[1]) + 0.01
        return (float(self.rng.uniform(x0 + m, x1 - m)), float(self.rng.uniform(y0 + m, y1 - m)))

    def fits(self, group: Sequence[SceneObject]) -> bool:
        x0, x1, y0, y1 = self.workspace
        for o in group:
            fp = o.footprint()
            if (fp[:, 0].min() < x0 or fp[:, 0].max() > x1
                    or fp[:, 1].min() < y0 or fp[:, 1].max() > y1):
                return False
            for p in self.objects:
                if separation(fp, p.footprint()) < self.clearance:
                    return False
        return True

    def place(self, make) -> list[SceneObject]:
        """Rejection-sample ``make()`` (a list of objects) until it fits."""
        while self.attempts < MAX_PLACEMENT_ATTEMPTS:
            self.attempts += 1
            group = make()
            if group is not None and self.fits(group):
                self.objects.extend(group)
                return group
        raise WorkspaceCapacityError(
            f"could not place {len(self.objects) + 1} objects in workspace {self.workspace} "
            f"after {MAX_PLACEMENT_ATTEMPTS} attempts")


def _single(pl: _Placer, height=None):
    dims = pl.dims(height)
    return [SceneObject(pl.next_id(), "box", pl.center(dims), dims, color=pl.color())]


def _brick_cluster(pl: _Placer, k: int, h: float):
    """``k`` blocks of height ``h`` in two flush rows laid like bricks.

    Rows share one width so their faces meet; the second row is offset by
    a fraction of a block, so the cluster outline is never a rectangle.
    """
    w = float(pl.rng.uniform(*BLOCK_SIDE))
    lengths = [float(v) for v in pl.rng.uniform(*BLOCK_SIDE, size=k)]
    top, bottom = lengths[:(k + 1) // 2], lengths[(k + 1) // 2:]
    offset = float(pl.rng.uniform(0.25, 0.4)) * top[0]
    along_y = bool(pl.rng.integers(2))
    span = max(sum(top), offset + sum(bottom))
    cx, cy = pl.center((span, 2 * w, h) if not along_y else (2 * w, span, h))
    first = pl.next_id()
    out = []
    for row, (ls, start) in enumerate(((top, 0.0), (bottom, offset))):
        t = start - span / 2.0
        for ln in ls:
            a = t + ln / 2.0
            b = (row - 0.5) * w
            center = (cy + b, cx + a)[::-1] if not along_y else (cx + b, cy + a)
            dims = (ln, w, h) if not along_y else (w, ln, h)
            out.append(SceneObject(first + len(out), "box", center, dims, color=pl.color()))
            t += ln
    return out


def _covering_pair(pl: _Placer):
    """An upper block leaning over a corner of a lower block."""
    dl = pl.dims()
    du = pl.dims(float(pl.rng.uniform(*BLOCK_HEIGHT)))
    cl = pl.center(dl)
    side = int(pl.rng.integers(4))
    axis = side % 2
    sign = 1.0 if side < 2 else -1.0
    across = 1 - axis
    overlap = float(pl.rng.uniform(0.012, 0.022))
    cu = [0.0, 0.0]
    cu[axis] = cl[axis] + sign * ((dl[axis] + du[axis]) / 2.0 - overlap)
    shift = float(pl.rng.uniform(0.45, 0.7)) * (dl[across] + du[across]) / 2.0
    cu[across] = cl[across] + shift * float(pl.rng.choice([-1.0, 1.0]))
    # ascent points from the upper block towards the lower one
    ascent_angle = math.atan2(-sign, 0.0) if axis == 1 else (math.pi if sign > 0 else 0.0)
    lower = SceneObject(pl.next_id(), "box", cl, dl, color=pl.color())
    upper = SceneObject(pl.next_id() + 1, "box", (cu[0], cu[1]), du,
                        tilt_axis=ascent_angle - math.pi / 2, color=pl.color(), support=lower.id)
    upper = _settle(upper, lower)
    if upper.support is None or upper.tilt < math.radians(20.0):
        return None
    return [lower, upper]


def _leaning_plate(pl: _Placer):
    """A thin plate propped at a steep angle (tilt >= 25 degrees)."""
    l, w = pl.rng.uniform(*BLOCK_SIDE, size=2)
    dims = (float(l), float(w), float(pl.rng.uniform(*PLATE_HEIGHT)))
    tilt = float(pl.rng.uniform(*TILT_RANGE))
    axis = float(pl.rng.integers(4)) * math.pi / 2
    return [SceneObject(pl.next_id(), "box", pl.center(dims), dims, tilt=tilt,
                        tilt_axis=axis, color=pl.color())]


def _pattern_groups(pattern: str, n: int) -> list[int]:
    """Sizes of the structured groups for ``pattern`` among ``n`` objects."""
    if pattern == "random":
        return []
    if pattern == "tilting":
        return [1] * n
    if pattern == "covering":
        return [2] * (n // 2)
    # gathering: brick clusters of three, pairs absorbing the remainder
    sizes = [3] * (n // 3)
    rest = n % 3
    if rest == 2:
        sizes.append(2)
    elif rest == 1:
        sizes[-1:] = [2, 2]
    return sizes


def generate_scene(pattern: str, n_objects: int, seed: int,
                   workspace=DEFAULT_WORKSPACE) -> Scene:
    """Deterministic random scene of ``n_objects`` blocks.

    ``gathering`` packs blocks of one shared height into brick-laid clusters, ``covering`` builds
    leaning pairs and ``tilting`` makes every object a steeply propped plate.
    Leftover objects, and all of them for ``random``, are scattered without
    contact.
    """
    if pattern not in PATTERNS:
        raise SceneError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    if not 1 <= n_objects <= 20:
        raise SceneError(f"n_objects must be in [1, 20], got {n_objects}")
    if pattern in ("gathering", "covering") and n_objects < 2:
        raise SceneError(f"pattern {pattern!r} needs at least 2 objects")
    rng = np.random.default_rng(seed)
    pl = _Placer(workspace, rng, RANDOM_CLEARANCE)
    # one shared height: any contact made by a push is another flush pair
    h = float(rng.uniform(*BLOCK_HEIGHT))
    maker = {"gathering": lambda g: _brick_cluster(pl, g, h),
             "covering": lambda g: _covering_pair(pl),
             "tilting": lambda g: _leaning_plate(pl)}
    for g in _pattern_groups(pattern, n_objects):
        pl.place(lambda: maker[pattern](g))
    while len(pl.objects) < n_objects:
        pl.place(lambda: _single(pl, h if pattern == "gathering" else None))
    scene = Scene(tuple(pl.objects), workspace, int(seed) & (2**64 - 1))
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# serialization

def scene_to_dict(scene: Scene) -> dict:
    objs = []
    for o in scene.objects:
        d = {"id": o.id, "shape": o.shape, "center": list(o.center), "dims": list(o.dims),
             "yaw": o.yaw, "tilt": o.tilt, "tilt_axis": o.tilt_axis, "color": list(o.color)}
        if o.support is not None:
            d["support"] = o.support
        objs.append(d)
    return {"workspace": list(scene.workspace), "seed": scene.rng_seed, "objects": objs}


def scene_from_dict(d: dict) -> Scene:
    try:
        objs = tuple(
            SceneObject(int(o["id"]), str(o["shape"]), tuple(map(float, o["center"])),
                        tuple(map(float, o["dims"])), float(o.get("yaw", 0.0)),
                        float(o.get("tilt", 0.0)), float(o.get("tilt_axis", 0.0)),
                        tuple(map(float, o.get("color", (0.8, 0.3, 0.3)))),
                        None if o.get("support") is None else int(o["support"]))
            for o in d["objects"])
        scene = Scene(objs, tuple(map(float, d["workspace"])), int(d["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"malformed scene: {exc}") from exc
    for o in scene.objects:
        if len(o.center) != 2 or len(o.dims) != 3 or len(o.color) != 3:
            raise SceneError(f"object {o.id}: wrong vector length")
    if len(scene.workspace) != 4:
        raise SceneError("workspace must have 4 entries")
    scene.validate()
    return scene


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n", encoding="utf-8")


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
