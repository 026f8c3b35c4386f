import json
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evrec.bench import (
    DifficultyRecord,
    LEVELS,
    config_hash,
    difficulty_level,
    difficulty_score,
    dumps_test_set,
    generate_test_set,
    load_test_set,
    loads_test_set,
    save_test_set,
    summary_rows,
    verify_against_world,
    world_from_dict,
    world_to_dict,
)
from evrec.errors import ChecksumMismatch, ParseError, RangeError
from evrec.world import WorldConfig


@pytest.fixture(scope="module")
def small_set():
    return generate_test_set(100, 5)


class TestScore:
    def test_examples(self):
        assert difficulty_score(1.0, 3.0, 1.0) == pytest.approx(1.0, abs=1e-15)
        assert difficulty_score(0.5, 6.0, 0.1) == pytest.approx(0.16, abs=1e-15)
        assert difficulty_score(0.0, 6.0, 0.0) == 0.0

    @pytest.mark.parametrize("d", [2.9, 6.1])
    def test_distance_range(self, d):
        with pytest.raises(RangeError):
            difficulty_score(0.5, d, 0.5)

    def test_levels(self):
        assert difficulty_level(0.16) == "Hard"
        assert difficulty_level(0.5) == "Moderate"
        assert difficulty_level(0.66) == "Easy"
        assert difficulty_level(0.33) == "Moderate"
        assert difficulty_level(0.3299999) == "Hard"

    @given(st.floats(0, 1), st.floats(3, 6), st.floats(0, 1), st.floats(0, 1), st.sampled_from([0, 1, 2]))
    def test_monotone(self, vis, dist, pix, bump, which):
        rank = {"Hard": 0, "Moderate": 1, "Easy": 2}
        base = difficulty_level(difficulty_score(vis, dist, pix))
        if which == 0:
            vis = vis + (1 - vis) * bump
        elif which == 1:
            dist = dist - (dist - 3) * bump     # closer is easier
        else:
            pix = pix + (1 - pix) * bump
        assert rank[difficulty_level(difficulty_score(vis, dist, pix))] >= rank[base]

    def test_record_check(self):
        DifficultyRecord(0.5, 6.0, 0.1, 0.16, "Hard").check()
        with pytest.raises(ValueError):
            DifficultyRecord(0.5, 6.0, 0.1, 0.17, "Hard").check()
        s = difficulty_score(0.5, 6.0, 0.1)
        DifficultyRecord(0.5, 6.0, 0.1, s, "Hard").check()
        with pytest.raises(ValueError):
            DifficultyRecord(0.5, 6.0, 0.1, s, "Easy").check()


class TestGeneration:
    def test_deterministic_bytes(self):
        assert dumps_test_set(generate_test_set(100, 3)) == dumps_test_set(generate_test_set(100, 3))

    def test_distance_and_rescoring(self, small_set):
        for it in small_set.items:
            assert 3.0 - 1e-9 <= it.instance.stats.distance_m <= 6.0 + 1e-9
            d = it.difficulty
            assert abs(difficulty_score(d.visibility, d.distance_m, d.pixels_norm) - d.score) <= 1e-12
        verify_against_world(small_set)

    def test_counts_sum(self, small_set):
        assert sum(small_set.counts.values()) == 100
        assert set(small_set.counts) == set(LEVELS)

    def test_levels_non_degenerate_and_fast(self):
        t0 = time.perf_counter()
        ts = generate_test_set(2000, 7)
        assert time.perf_counter() - t0 < 60
        for lvl, c in ts.counts.items():
            assert c >= 0.05 * 2000, (lvl, c)

    def test_prefix_stable(self):
        a, b = generate_test_set(20, 9), generate_test_set(40, 9)
        assert dumps_test_set(a).split("\n")[1:21] == dumps_test_set(b).split("\n")[1:21]

    def test_summary(self, small_set):
        rows = summary_rows(small_set)
        assert [r["level"] for r in rows] == list(LEVELS)
        assert sum(r["count"] for r in rows) == 100


class TestPersistence:
    def test_round_trip(self, small_set, tmp_path):
        save_test_set(small_set, tmp_path / "t.jsonl")
        back = load_test_set(tmp_path / "t.jsonl", verify_scenes=True)
        assert back.items == small_set.items
        assert back.seed == small_set.seed and back.world == small_set.world
        assert dumps_test_set(back) == dumps_test_set(small_set)

    def test_truncated(self, small_set):
        text = dumps_test_set(small_set)
        lines = text.split("\n")
        cut = "\n".join(lines[:51]) + "\n" + lines[51][:20]
        with pytest.raises(ParseError) as exc:
            loads_test_set(cut)
        assert exc.value.line == 52

    def test_missing_rows(self, small_set):
        lines = dumps_test_set(small_set).split("\n")
        with pytest.raises(ParseError):
            loads_test_set("\n".join(lines[:40]) + "\n")

    def test_edited_score(self, small_set):
        lines = dumps_test_set(small_set).split("\n")
        row = json.loads(lines[10])
        row["score"] = row["score"] + 0.01
        lines[10] = json.dumps(row, sort_keys=True, separators=(",", ":"))
        with pytest.raises(ParseError) as exc:
            loads_test_set("\n".join(lines))
        assert exc.value.line == 11

    def test_checksum(self, small_set):
        lines = dumps_test_set(small_set).split("\n")
        lines[3], lines[4] = lines[4], lines[3]
        with pytest.raises(ChecksumMismatch):
            loads_test_set("\n".join(lines))

    def test_config_hash_mismatch(self, small_set):
        lines = dumps_test_set(small_set).split("\n")
        head = json.loads(lines[0])
        head["world"]["cap_cells"] = 41
        lines[0] = json.dumps(head)
        with pytest.raises(ChecksumMismatch):
            loads_test_set("\n".join(lines))

    def test_world_dict_round_trip(self):
        cfg = WorldConfig(wall_density=0.1, target_cells=(3, 9))
        assert world_from_dict(world_to_dict(cfg)) == cfg
        assert config_hash(cfg) != config_hash(WorldConfig())
