"""Difficulty scoring and stratified test sets.

Each test instance is scored from what the agent sees at its start pose:

    score = 0.2 * visibility + 0.2 * (1 - (distance - 3) / 3) + 0.6 * pixels_norm

with ``pixels_norm = min(1, observed_cells / cap_cells)``, and labelled
Hard (< 0.33), Moderate (< 0.66) or Easy.

Test sets are stored as JSON lines: a header with the generating seed, the
world configuration and a checksum of the body, then one instance per line.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, GenerationFailed, ParseError, RangeError
from .world import (
    EpisodeInstance,
    Pose,
    ViewStats,
    WorldConfig,
    generate_scene,
    sample_start,
    visibility_stats,
)

WEIGHTS = (0.2, 0.2, 0.6)
HARD_BELOW = 0.33
MODERATE_BELOW = 0.66
LEVELS = ("Easy", "Moderate", "Hard")
DIST_RANGE = (3.0, 6.0)
SCHEMA_VERSION = 1
FORMAT = "evrec-testset"
SCORE_TOL = 1e-12
_DIST_SLACK = 1e-9


def difficulty_score(visibility: float, distance_m: float, pixels_norm: float) -> float:
    lo, hi = DIST_RANGE
    if not lo - _DIST_SLACK <= distance_m <= hi + _DIST_SLACK:
        raise RangeError(f"distance {distance_m} m outside [{lo}, {hi}] m")
    if not 0.0 <= visibility <= 1.0:
        raise RangeError(f"visibility {visibility} outside [0, 1]")
    if not 0.0 <= pixels_norm <= 1.0:
        raise RangeError(f"pixels_norm {pixels_norm} outside [0, 1]")
    w_vis, w_dist, w_pix = WEIGHTS
    s = w_vis * visibility + w_dist * (1.0 - (distance_m - lo) / (hi - lo)) + w_pix * pixels_norm
    return min(1.0, max(0.0, s))


def difficulty_level(score: float) -> str:
    if score < HARD_BELOW:
        return "Hard"
    if score < MODERATE_BELOW:
        return "Moderate"
    return "Easy"


def pixels_norm(observed_cells: int, cap_cells: int) -> float:
    return min(1.0, observed_cells / cap_cells)


@dataclass(frozen=True)
class DifficultyRecord:
    visibility: float
    distance_m: float
    pixels_norm: float
    score: float
    level: str

    @classmethod
    def from_stats(cls, stats: ViewStats, cap_cells: int) -> "DifficultyRecord":
        pn = pixels_norm(stats.observed_cells, cap_cells)
        s = difficulty_score(stats.visibility, stats.distance_m, pn)
        return cls(stats.visibility, stats.distance_m, pn, s, difficulty_level(s))

    def check(self):
        """Raise ValueError if the stored score or level disagree with the factors."""
        s = difficulty_score(self.visibility, self.distance_m, self.pixels_norm)
        if abs(s - self.score) > SCORE_TOL:
            raise ValueError(f"score {self.score!r} does not match factors (expected {s!r})")
        if self.level != difficulty_level(self.score):
            raise ValueError(f"level {self.level!r} inconsistent with score {self.score!r}")


@dataclass(frozen=True)
class TestItem:
    instance: EpisodeInstance
    difficulty: DifficultyRecord

    @property
    def level(self):
        return self.difficulty.level


@dataclass
class TestSet:
    items: list
    seed: int
    world: WorldConfig = field(default_factory=WorldConfig)

    __test__ = False  # not a pytest class

    def __len__(self):
        return len(self.items)

    @property
    def counts(self) -> dict:
        c = Counter(it.level for it in self.items)
        return {lvl: c.get(lvl, 0) for lvl in LEVELS}

    def levels(self) -> list:
        return [it.level for it in self.items]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def derive_seed(*parts) -> int:
    """Stable 63-bit seed from integer parts."""
    a, b = np.random.SeedSequence([int(p) for p in parts]).generate_state(2)
    return int((int(a) << 31) ^ int(b)) & ((1 << 63) - 1)


TEST_DOMAIN = 1
TRAIN_DOMAIN = 2


def sample_instance(index, master_seed, cfg: WorldConfig, domain=TEST_DOMAIN) -> EpisodeInstance:
    """One episode instance; deterministic in (master_seed, domain, index)."""
    for attempt in range(cfg.max_retries):
        scene_seed = derive_seed(master_seed, domain, index, attempt)
        try:
            scene = generate_scene(scene_seed, cfg)
            rng = np.random.default_rng(derive_seed(scene_seed, 7))
            pose, stats = sample_start(scene, rng, cfg)
        except GenerationFailed:
            continue
        stored = ViewStats(stats.visibility, stats.distance_m, stats.observed_cells)
        return EpisodeInstance(scene_seed, pose, scene.target_class, stored)
    raise GenerationFailed(derive_seed(master_seed, domain, index, 0), f"instance {index}")


def generate_test_set(n: int, master_seed: int, cfg: WorldConfig = WorldConfig()) -> TestSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    items = []
    for i in range(n):
        inst = sample_instance(i, master_seed, cfg, TEST_DOMAIN)
        items.append(TestItem(inst, DifficultyRecord.from_stats(inst.stats, cfg.cap_cells)))
    return TestSet(items, int(master_seed), cfg)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def world_to_dict(cfg: WorldConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def world_from_dict(d: dict) -> WorldConfig:
    names = {f.name for f in dataclasses.fields(WorldConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown world config keys: {sorted(unknown)}")
    return WorldConfig(**d)


def config_hash(cfg: WorldConfig) -> str:
    blob = json.dumps(world_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _row(item: TestItem) -> dict:
    inst, d = item.instance, item.difficulty
    return {
        "v": SCHEMA_VERSION,
        "scene_seed": inst.scene_seed,
        "start": inst.start.to_record(),
        "target_class": inst.target_class,
        "stats": inst.stats.to_record(),
        "score": d.score,
        "level": d.level,
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps_test_set(ts: TestSet) -> str:
    body = [_dumps(_row(it)) for it in ts.items]
    digest = hashlib.sha256("\n".join(body).encode()).hexdigest()
    header = {
        "format": FORMAT,
        "v": SCHEMA_VERSION,
        "seed": ts.seed,
        "n": len(body),
        "config_hash": config_hash(ts.world),
        "world": world_to_dict(ts.world),
        "sha256": digest,
    }
    return "\n".join([_dumps(header)] + body) + "\n"


def save_test_set(ts: TestSet, path):
    Path(path).write_text(dumps_test_set(ts))


def _parse_row(obj, cfg: WorldConfig) -> TestItem:
    if obj.get("v") != SCHEMA_VERSION:
        raise ValueError(f"unsupported row version {obj.get('v')!r}")
    st = obj["stats"]
    stats = ViewStats(float(st["visibility"]), float(st["distance_m"]), int(st["observed_cells"]))
    if not 0.0 <= stats.visibility <= 1.0:
        raise ValueError("visibility outside [0, 1]")
    inst = EpisodeInstance(int(obj["scene_seed"]), Pose.from_record(obj["start"]),
                           int(obj["target_class"]), stats)
    if not 0 <= inst.target_class < cfg.n_classes:
        raise ValueError(f"target_class {inst.target_class} outside [0, {cfg.n_classes})")
    pn = pixels_norm(stats.observed_cells, cfg.cap_cells)
    rec = DifficultyRecord(stats.visibility, stats.distance_m, pn, float(obj["score"]), obj["level"])
    rec.check()
    return TestItem(inst, rec)


def loads_test_set(text: str, verify_scenes: bool = False) -> TestSet:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(1, "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"bad header: {exc.msg}") from None
    if header.get("format") != FORMAT or header.get("v") != SCHEMA_VERSION:
        raise ParseError(1, f"unsupported header {header.get('format')!r} v{header.get('v')!r}")
    try:
        cfg = world_from_dict(header["world"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(1, f"bad world config: {exc}") from None
    if config_hash(cfg) != header.get("config_hash"):
        raise ChecksumMismatch("config hash does not match the embedded world config")
    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            items.append(_parse_row(json.loads(line), cfg))
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, f"malformed JSON: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(lineno, str(exc)) from None
    if len(items) != header.get("n"):
        raise ParseError(len(lines) + 1, f"expected {header.get('n')} rows, found {len(items)}")
    digest = hashlib.sha256("\n".join(lines[1:]).encode()).hexdigest()
    if digest != header.get("sha256"):
        raise ChecksumMismatch("body checksum mismatch")
    ts = TestSet(items, int(header["seed"]), cfg)
    if verify_scenes:
        verify_against_world(ts)
    return ts


def load_test_set(path, verify_scenes: bool = False) -> TestSet:
    return loads_test_set(Path(path).read_text(), verify_scenes=verify_scenes)


def verify_against_world(ts: TestSet):
    """Regenerate every scene and check the stored start statistics."""
    for lineno, it in enumerate(ts.items, start=2):
        inst = it.instance
        scene = generate_scene(inst.scene_seed, ts.world)
        st = visibility_stats(scene, inst.start, ts.world)
        if (scene.target_class != inst.target_class or st.observed_cells != inst.stats.observed_cells
                or abs(st.visibility - inst.stats.visibility) > SCORE_TOL
                or abs(st.distance_m - inst.stats.distance_m) > SCORE_TOL):
            raise ParseError(lineno, "instance does not match its regenerated scene")


def summary_rows(ts: TestSet):
    rows = []
    for lvl in LEVELS:
        scores = [it.difficulty.score for it in ts.items if it.level == lvl]
        mean = math.fsum(scores) / len(scores) if scores else float("nan")
        rows.append({"level": lvl, "count": len(scores), "mean_score": mean})
    return rows


def write_summary_csv(ts: TestSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["level", "count", "mean_score"])
        w.writeheader()
        for r in summary_rows(ts):
            w.writerow(r)
