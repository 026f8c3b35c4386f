"""Deterministic 2-D occluded gridworld with a synthetic feature sensor.

Coordinates are integer cells ``(x, y)`` with ``y`` pointing up; an agent
stands at its cell centre. Headings are degrees counter-clockwise from +x,
always a multiple of 10. ``turn_left`` adds 10 degrees.

The sensor sees a target cell when the cell centre lies inside the field of
view cone, within range, and the segment to it crosses no wall cell. How
much of the target is seen, how far away it is and how many cells are seen
set an observation quality ``q`` in [0, 1]; the emitted feature is the class
prototype scaled by ``q`` plus Gaussian noise that shrinks as ``q`` grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import GenerationFailed

CELL_M = 0.25

MOVE_FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2
ACTIONS = ("move_forward", "turn_left", "turn_right")
TURN_DEG = 10

# forward direction per heading octant, counter-clockwise from +x
_OCTANT_STEP = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))

QUALITY_WEIGHTS = (0.2, 0.2, 0.6)


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 8
    feature_dim: int = 16
    width: int = 32
    height: int = 32
    wall_density: float = 0.06
    wall_segment: tuple = (1, 5)
    target_cells: tuple = (12, 80)
    target_max_side: int = 10
    fov_deg: float = 90.0
    range_m: float = 8.0
    cap_cells: int = 40
    sigma0: float = 1.0
    sigma_min: float = 0.05
    prototype_seed: int = 0
    spawn_range_m: tuple = (3.0, 6.0)
    heading_jitter_deg: int = 40
    max_retries: int = 50
    cue_dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "wall_segment", tuple(self.wall_segment))
        object.__setattr__(self, "target_cells", tuple(self.target_cells))
        object.__setattr__(self, "spawn_range_m", tuple(float(v) for v in self.spawn_range_m))
        if self.n_classes < 2 or self.feature_dim < 1:
            raise ValueError("need n_classes >= 2 and feature_dim >= 1")
        if self.width < 8 or self.height < 8:
            raise ValueError("grid must be at least 8x8")
        if not 0.0 <= self.wall_density < 0.5:
            raise ValueError("wall_density must lie in [0, 0.5)")
        lo, hi = self.target_cells
        if not 1 <= lo <= hi:
            raise ValueError("target_cells must be (min, max) with 1 <= min <= max")
        if not 0.0 <= self.cue_dropout <= 1.0:
            raise ValueError("cue_dropout must lie in [0, 1]")


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int

    def __post_init__(self):
        h = int(self.heading) % 360
        if h % TURN_DEG:
            raise ValueError(f"heading {self.heading} is not a multiple of {TURN_DEG}")
        object.__setattr__(self, "heading", h)
        object.__setattr__(self, "x", int(self.x))
        object.__setattr__(self, "y", int(self.y))

    def to_record(self):
        return {"x": self.x, "y": self.y, "heading": self.heading}

    @classmethod
    def from_record(cls, rec):
        return cls(rec["x"], rec["y"], rec["heading"])


@dataclass(frozen=True, eq=False)
class Scene:
    seed: int
    walls: np.ndarray          # bool (height, width), indexed [y, x]
    target: tuple              # ((x, y), ...) target cells
    target_class: int
    prototype: np.ndarray = field(repr=False)

    @property
    def width(self):
        return self.walls.shape[1]

    @property
    def height(self):
        return self.walls.shape[0]

    @property
    def target_center(self):
        t = np.asarray(self.target, dtype=float)
        return t.mean(axis=0) + 0.5

    def is_free(self, x, y):
        if not (0 <= x < self.width and 0 <= y < self.height):
            return False
        return not self.walls[y, x] and (x, y) not in self._target_set

    @property
    def _target_set(self):
        s = self.__dict__.get("_tset")
        if s is None:
            s = frozenset(self.target)
            object.__setattr__(self, "_tset", s)
        return s


@dataclass(frozen=True)
class ViewStats:
    visibility: float
    distance_m: float
    observed_cells: int
    bearing_deg: Optional[float] = None

    @property
    def visible(self):
        return self.observed_cells > 0

    def to_record(self):
        return {"visibility": self.visibility, "distance_m": self.distance_m,
                "observed_cells": self.observed_cells}


@dataclass(frozen=True, eq=False)
class Observation:
    feature: np.ndarray
    cue: ViewStats
    quality: float
    true_class: int


@dataclass(frozen=True)
class EpisodeInstance:
    scene_seed: int
    start: Pose
    target_class: int
    stats: ViewStats


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _prototypes(k, d, seed):
    rng = np.random.default_rng([seed, k, d])
    if k <= d:
        q, r = np.linalg.qr(rng.standard_normal((d, k)))
        protos = (q * np.sign(np.diag(r))).T
    else:
        protos = rng.standard_normal((k, d))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    protos = np.ascontiguousarray(protos)
    protos.setflags(write=False)
    return protos


def make_prototypes(n_classes, dim, seed=0):
    """Unit-norm class prototypes, orthonormal whenever ``n_classes <= dim``."""
    return _prototypes(int(n_classes), int(dim), int(seed))


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _spawn_cells(walls, target, spawn_range_m):
    h, w = walls.shape
    center = np.asarray(target, dtype=float).mean(axis=0) + 0.5
    ys, xs = np.mgrid[0:h, 0:w]
    dist = np.hypot(xs + 0.5 - center[0], ys + 0.5 - center[1]) * CELL_M
    free = ~walls
    for x, y in target:
        free[y, x] = False
    lo, hi = spawn_range_m
    ok = free & (dist >= lo) & (dist <= hi)
    yy, xx = np.nonzero(ok)
    return list(zip(xx.tolist(), yy.tolist()))


def _place_target(rng, cfg):
    lo, hi = cfg.target_cells
    side = cfg.target_max_side
    for _ in range(100):
        tw, th = (int(v) for v in rng.integers(1, side + 1, size=2))
        if lo <= tw * th <= hi:
            break
    else:
        tw, th = 1, lo
    x0 = int(rng.integers(1, cfg.width - tw))
    y0 = int(rng.integers(1, cfg.height - th))
    return tuple((x, y) for y in range(y0, y0 + th) for x in range(x0, x0 + tw))


def _place_walls(rng, cfg, target):
    walls = np.zeros((cfg.height, cfg.width), dtype=bool)
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True
    tmask = np.zeros_like(walls)
    for x, y in target:
        tmask[y, x] = True
    interior = (cfg.width - 2) * (cfg.height - 2)
    goal = int(round(cfg.wall_density * interior))
    placed = 0
    seg_lo, seg_hi = cfg.wall_segment
    for _ in range(20 * goal + 10):
        if placed >= goal:
            break
        length = int(rng.integers(seg_lo, seg_hi + 1))
        horizontal = bool(rng.integers(0, 2))
        x = int(rng.integers(1, cfg.width - 1))
        y = int(rng.integers(1, cfg.height - 1))
        for i in range(length):
            cx, cy = (x + i, y) if horizontal else (x, y + i)
            if not (0 < cx < cfg.width - 1 and 0 < cy < cfg.height - 1):
                break
            if tmask[cy, cx] or walls[cy, cx]:
                continue
            walls[cy, cx] = True
            placed += 1
    return walls


@lru_cache(maxsize=4096)
def generate_scene(seed: int, cfg: WorldConfig = WorldConfig()) -> Scene:
    """Deterministic scene for ``seed``; retries with derived sub-seeds."""
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([int(seed), attempt])
        target = _place_target(rng, cfg)
        walls = _place_walls(rng, cfg, target)
        cls = int(rng.integers(0, cfg.n_classes))
        if _spawn_cells(walls, target, cfg.spawn_range_m):
            walls.setflags(write=False)
            proto = make_prototypes(cfg.n_classes, cfg.feature_dim, cfg.prototype_seed)[cls]
            return Scene(int(seed), walls, target, cls, proto)
    raise GenerationFailed(seed, "no free cell within the spawn range")


def scene_with(walls, target, target_class=0, cfg: WorldConfig = WorldConfig(), seed=-1) -> Scene:
    """Hand-built scene, for tests and debugging."""
    walls = np.array(walls, dtype=bool)
    walls.setflags(write=False)
    target = tuple((int(x), int(y)) for x, y in target)
    for x, y in target:
        if walls[y, x]:
            raise ValueError(f"target cell {(x, y)} is a wall")
    proto = make_prototypes(cfg.n_classes, cfg.feature_dim, cfg.prototype_seed)[target_class]
    return Scene(seed, walls, target, int(target_class), proto)


def sample_start(scene: Scene, rng, cfg: WorldConfig = WorldConfig(), require_visible=True,
                 tries=200) -> tuple[Pose, ViewStats]:
    """Random start pose within the spawn range, facing roughly at the target.

    The heading is the bearing to the target centre plus a uniform jitter of
    up to ``heading_jitter_deg``, rounded to the 10-degree lattice. With
    ``require_visible`` the pose must see at least one target cell.
    """
    cells = _spawn_cells(np.array(scene.walls), scene.target, cfg.spawn_range_m)
    if not cells:
        raise GenerationFailed(scene.seed, "no spawn cell")
    cx, cy = scene.target_center
    jit = cfg.heading_jitter_deg
    for _ in range(tries):
        x, y = cells[int(rng.integers(len(cells)))]
        bearing = math.degrees(math.atan2(cy - (y + 0.5), cx - (x + 0.5)))
        offset = float(rng.uniform(-jit, jit)) if jit > 0 else 0.0
        heading = int(round((bearing + offset) / TURN_DEG)) * TURN_DEG
        pose = Pose(x, y, heading)
        stats = visibility_stats(scene, pose, cfg)
        if stats.visible or not require_visible:
            return pose, stats
    raise GenerationFailed(scene.seed, "no start pose sees the target")


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def forward_delta(heading):
    return _OCTANT_STEP[int(round(heading / 45.0)) % 8]


def forward_blocked(scene: Scene, pose: Pose) -> bool:
    dx, dy = forward_delta(pose.heading)
    nx_, ny_ = pose.x + dx, pose.y + dy
    if not scene.is_free(nx_, ny_):
        return True
    # no squeezing diagonally between two blocked cells
    if dx and dy and not scene.is_free(pose.x + dx, pose.y) and not scene.is_free(pose.x, pose.y + dy):
        return True
    return False


def step(scene: Scene, pose: Pose, action: int) -> Pose:
    if action == MOVE_FORWARD:
        if forward_blocked(scene, pose):
            return pose
        dx, dy = forward_delta(pose.heading)
        return Pose(pose.x + dx, pose.y + dy, pose.heading)
    if action == TURN_LEFT:
        return Pose(pose.x, pose.y, pose.heading + TURN_DEG)
    if action == TURN_RIGHT:
        return Pose(pose.x, pose.y, pose.heading - TURN_DEG)
    raise ValueError(f"unknown action {action!r}")


# ---------------------------------------------------------------------------
# sensing
# ---------------------------------------------------------------------------

_RAY_STEP = 0.1  # cells between ray samples


def wrap_deg(a):
    """Wrap to (-180, 180]."""
    a = np.mod(np.asarray(a, dtype=float) + 180.0, 360.0) - 180.0
    a = np.where(a == -180.0, 180.0, a)
    return a if a.ndim else float(a)


def bearing_to(scene: Scene, pose: Pose) -> float:
    """Angle of the target centre relative to the heading, left positive."""
    cx, cy = scene.target_center
    b = math.degrees(math.atan2(cy - (pose.y + 0.5), cx - (pose.x + 0.5)))
    return wrap_deg(b - pose.heading)


def distance_to(scene: Scene, pose: Pose) -> float:
    cx, cy = scene.target_center
    return math.hypot(cx - (pose.x + 0.5), cy - (pose.y + 0.5)) * CELL_M


def visible_cells(scene: Scene, pose: Pose, cfg: WorldConfig = WorldConfig()) -> np.ndarray:
    """Boolean mask over ``scene.target``: cells in view, in range and unoccluded."""
    tc = np.asarray(scene.target, dtype=float) + 0.5
    p = np.array([pose.x + 0.5, pose.y + 0.5])
    d = tc - p
    dist = np.hypot(d[:, 0], d[:, 1])
    ang = wrap_deg(np.degrees(np.arctan2(d[:, 1], d[:, 0])) - pose.heading)
    cand = (np.abs(ang) <= cfg.fov_deg / 2 + 1e-9) & (dist * CELL_M <= cfg.range_m + 1e-9)
    out = np.zeros(len(tc), dtype=bool)
    if not cand.any():
        return out
    dc = d[cand]
    n = max(2, int(math.ceil(dist[cand].max() / _RAY_STEP)))
    ts = np.arange(1, n) / n
    pts = p + ts[:, None, None] * dc[None, :, :]
    cells = np.floor(pts).astype(int)
    hit = scene.walls[cells[..., 1], cells[..., 0]]
    out[np.flatnonzero(cand)] = ~hit.any(axis=0)
    return out


def visibility_stats(scene: Scene, pose: Pose, cfg: WorldConfig = WorldConfig()) -> ViewStats:
    # scenes are immutable, so stats are memoised per (pose, sensor geometry)
    cache = scene.__dict__.get("_stats")
    if cache is None:
        cache = {}
        object.__setattr__(scene, "_stats", cache)
    key = (pose.x, pose.y, pose.heading, cfg.fov_deg, cfg.range_m)
    st = cache.get(key)
    if st is None:
        mask = visible_cells(scene, pose, cfg)
        n_vis = int(mask.sum())
        bearing = bearing_to(scene, pose) if n_vis else None
        st = ViewStats(n_vis / len(scene.target), distance_to(scene, pose), n_vis, bearing)
        cache[key] = st
    return st


def distance_factor(distance_m):
    """1 at 3 m or closer, 0 at 6 m or farther, linear in between."""
    return min(1.0, max(0.0, 1.0 - (distance_m - 3.0) / 3.0))


def quality(stats: ViewStats, cfg: WorldConfig = WorldConfig()) -> float:
    if not stats.visible:
        return 0.0
    w_vis, w_dist, w_pix = QUALITY_WEIGHTS
    q = (w_vis * stats.visibility + w_dist * distance_factor(stats.distance_m)
         + w_pix * min(1.0, stats.observed_cells / cfg.cap_cells))
    return min(1.0, max(0.0, q))


def observe(scene: Scene, pose: Pose, rng, cfg: WorldConfig = WorldConfig(), stats=None) -> Observation:
    """Draw one sensor reading; consumes exactly ``feature_dim`` normals
    (plus one uniform when ``cue_dropout`` is enabled)."""
    if stats is None:
        stats = visibility_stats(scene, pose, cfg)
    eps = rng.standard_normal(cfg.feature_dim)
    q = quality(stats, cfg)
    if q == 0.0:
        feat = cfg.sigma0 * eps
    else:
        feat = q * scene.prototype + (cfg.sigma0 * (1.0 - q) + cfg.sigma_min) * eps
    cue = stats
    if cfg.cue_dropout > 0 and rng.random() < cfg.cue_dropout:
        cue = ViewStats(0.0, stats.distance_m, 0, None)
    return Observation(feat, cue, q, scene.target_class)


# ---------------------------------------------------------------------------
# heuristic policy
# ---------------------------------------------------------------------------

FIXATION_TOL_DEG = 5.0
FIXATION_STOP_M = 1.5


def fixation_shortest_path_action(scene: Scene, pose: Pose) -> int:
    """Centre the target, then walk at it until 1.5 m or blocked.

    Uses the true target location regardless of visibility. Once centred
    and unable to advance it turns toward the side the target lies on,
    which makes it oscillate around the target direction.
    """
    err = bearing_to(scene, pose)
    if abs(err) > FIXATION_TOL_DEG:
        if abs(err) >= 180.0 - 1e-9:
            return TURN_LEFT
        return TURN_LEFT if err > 0 else TURN_RIGHT
    if distance_to(scene, pose) > FIXATION_STOP_M and not forward_blocked(scene, pose):
        return MOVE_FORWARD
    return TURN_LEFT if err >= 0 else TURN_RIGHT


# ---------------------------------------------------------------------------
# debugging
# ---------------------------------------------------------------------------

_OCTANT_GLYPH = (">", "/", "^", "\\", "<", "/", "v", "\\")


def ascii_dump(scene: Scene, pose: Optional[Pose] = None) -> str:
    """Walls '#', target 'T', agent '@', heading glyph on the cell ahead."""
    grid = [["#" if scene.walls[y, x] else "." for x in range(scene.width)] for y in range(scene.height)]
    for x, y in scene.target:
        grid[y][x] = "T"
    if pose is not None:
        grid[pose.y][pose.x] = "@"
        dx, dy = forward_delta(pose.heading)
        gx, gy = pose.x + dx, pose.y + dy
        if 0 <= gx < scene.width and 0 <= gy < scene.height and grid[gy][gx] == ".":
            grid[gy][gx] = _OCTANT_GLYPH[int(round(pose.heading / 45.0)) % 8]
    return "\n".join("".join(row) for row in reversed(grid))
