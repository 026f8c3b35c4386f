import math

import numpy as np
import pytest

from evrec.world import (
    FIXATION_TOL_DEG,
    MOVE_FORWARD,
    TURN_LEFT,
    TURN_RIGHT,
    Pose,
    WorldConfig,
    ascii_dump,
    bearing_to,
    distance_to,
    fixation_shortest_path_action,
    generate_scene,
    make_prototypes,
    observe,
    quality,
    sample_start,
    scene_with,
    step,
    visibility_stats,
)


def open_walls(n=20):
    w = np.zeros((n, n), dtype=bool)
    w[0, :] = w[-1, :] = w[:, 0] = w[:, -1] = True
    return w


def open_scene(target, cls=0, cfg=WorldConfig(), walls=None):
    return scene_with(open_walls() if walls is None else walls, target, cls, cfg)


class TestGeneration:
    def test_deterministic(self):
        a = generate_scene.__wrapped__(11)
        b = generate_scene.__wrapped__(11)
        np.testing.assert_array_equal(a.walls, b.walls)
        assert a.target == b.target and a.target_class == b.target_class

    def test_hundred_seeds(self):
        cfg = WorldConfig()
        for seed in range(100):
            s = generate_scene(seed, cfg)
            lo, hi = cfg.target_cells
            assert lo <= len(s.target) <= hi
            assert not any(s.walls[y, x] for x, y in s.target)
            rng = np.random.default_rng(seed)
            pose, stats = sample_start(s, rng, cfg)
            assert s.is_free(pose.x, pose.y)
            assert 3.0 - 1e-9 <= stats.distance_m <= 6.0 + 1e-9

    def test_prototypes(self):
        p = make_prototypes(8, 16)
        np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0)
        np.testing.assert_allclose(p @ p.T, np.eye(8), atol=1e-12)
        q = make_prototypes(20, 4)
        assert len({tuple(np.round(r, 12)) for r in q}) == 20

    def test_config_validation(self):
        with pytest.raises(ValueError):
            WorldConfig(wall_density=0.7)
        with pytest.raises(ValueError):
            WorldConfig(target_cells=(5, 2))


class TestStep:
    def test_turns_inverse(self):
        s = open_scene([(15, 15)])
        p = Pose(5, 5, 30)
        assert step(s, step(s, p, TURN_LEFT), TURN_RIGHT) == p

    def test_full_rotation(self):
        s = open_scene([(15, 15)])
        p = Pose(5, 5, 30)
        q = p
        for _ in range(36):
            q = step(s, q, TURN_LEFT)
        assert q == p

    def test_forward(self):
        s = open_scene([(15, 15)])
        assert step(s, Pose(5, 5, 0), MOVE_FORWARD) == Pose(6, 5, 0)
        assert step(s, Pose(5, 5, 90), MOVE_FORWARD) == Pose(5, 6, 90)
        assert step(s, Pose(5, 5, 50), MOVE_FORWARD) == Pose(6, 6, 50)

    def test_wall_no_op(self):
        s = open_scene([(15, 15)])
        p = Pose(1, 5, 180)
        assert step(s, p, MOVE_FORWARD) == p

    def test_target_blocks(self):
        s = open_scene([(6, 5)])
        assert step(s, Pose(5, 5, 0), MOVE_FORWARD) == Pose(5, 5, 0)

    def test_random_walk_stays_free(self):
        cfg = WorldConfig()
        for seed in range(10):
            s = generate_scene(seed, cfg)
            rng = np.random.default_rng(seed)
            p, _ = sample_start(s, rng, cfg)
            for a in rng.integers(0, 3, size=300):
                p = step(s, p, int(a))
                assert s.is_free(p.x, p.y)

    def test_bad_heading(self):
        with pytest.raises(ValueError):
            Pose(1, 1, 15)


class TestVisibility:
    def test_centered_unobstructed(self):
        s = open_scene([(10, 5), (10, 6), (11, 5), (11, 6)])
        st = visibility_stats(s, Pose(5, 5, 0))
        assert st.visibility == 1.0 and st.observed_cells == 4

    def test_total_occlusion(self):
        w = open_walls()
        w[2:10, 8] = True
        s = open_scene([(10, 5), (10, 6)], walls=w)
        st = visibility_stats(s, Pose(5, 5, 0))
        assert st.visibility == 0.0 and st.observed_cells == 0
        assert st.bearing_deg is None

    def test_half_in_fov(self):
        # heading 10 -> cone [-35, 55]; cell centres at 54.5 and 58.0 degrees
        s = open_scene([(10, 12), (10, 13)])
        st = visibility_stats(s, Pose(5, 5, 10))
        assert st.visibility == 0.5 and st.observed_cells == 1

    def test_behind(self):
        s = open_scene([(10, 5)])
        assert visibility_stats(s, Pose(12, 5, 0)).visibility == 0.0

    def test_out_of_range(self):
        w = np.zeros((8, 60), dtype=bool)
        s = scene_with(w, [(50, 4)])
        assert visibility_stats(s, Pose(10, 4, 0)).visibility == 0.0   # 10 m
        assert visibility_stats(s, Pose(25, 4, 0)).visibility == 1.0   # 6.25 m

    def test_distance(self):
        s = open_scene([(10, 5)])
        assert distance_to(s, Pose(6, 5, 0)) == pytest.approx(1.0)

    def test_invariants_random(self):
        cfg = WorldConfig()
        for seed in range(20):
            s = generate_scene(seed, cfg)
            rng = np.random.default_rng(seed)
            for _ in range(20):
                p, st = sample_start(s, rng, cfg, require_visible=False)
                assert 0.0 <= st.visibility <= 1.0
                assert st.observed_cells <= len(s.target)
                assert st.distance_m >= 0
                assert 0.0 <= quality(st, cfg) <= 1.0


class TestObserve:
    def test_invisible_is_pure_noise(self):
        w = open_walls()
        w[2:10, 8] = True
        s = open_scene([(10, 5)], walls=w)
        cfg = WorldConfig()
        obs = observe(s, Pose(5, 5, 0), np.random.default_rng(3), cfg)
        eps = np.random.default_rng(3).standard_normal(cfg.feature_dim)
        np.testing.assert_array_equal(obs.feature, cfg.sigma0 * eps)
        assert obs.quality == 0.0 and not obs.cue.visible

    def test_noiseless_limit(self):
        cfg = WorldConfig(sigma_min=0.0, cap_cells=2)
        s = open_scene([(8, 5), (8, 6)], cls=3, cfg=cfg)
        obs = observe(s, Pose(5, 5, 0), np.random.default_rng(0), cfg)
        assert obs.quality == 1.0
        np.testing.assert_array_equal(obs.feature, make_prototypes(8, 16)[3])

    def test_deterministic(self):
        s = open_scene([(10, 5)])
        a = observe(s, Pose(5, 5, 0), np.random.default_rng(9))
        b = observe(s, Pose(5, 5, 0), np.random.default_rng(9))
        np.testing.assert_array_equal(a.feature, b.feature)

    def test_quality_formula(self):
        s = open_scene([(10, 5), (10, 6)])
        st = visibility_stats(s, Pose(5, 5, 0))
        d = st.distance_m
        expect = 0.2 * 1.0 + 0.2 * min(1, max(0, 1 - (d - 3) / 3)) + 0.6 * 2 / 40
        assert quality(st) == pytest.approx(expect, abs=1e-15)

    def test_mean_converges(self):
        cfg = WorldConfig()
        s = open_scene([(x, y) for x in (12, 13, 14) for y in (4, 5, 6)], cls=2)
        pose = Pose(3, 5, 0)
        rng = np.random.default_rng(0)
        feats = np.array([observe(s, pose, rng, cfg).feature for _ in range(10_000)])
        q = quality(visibility_stats(s, pose, cfg), cfg)
        sigma = cfg.sigma0 * (1 - q) + cfg.sigma_min
        assert np.all(np.abs(feats.mean(axis=0) - q * s.prototype) <= 3 * sigma / 100)


class TestFixation:
    def test_aligned_moves(self):
        s = open_scene([(15, 5)])    # 2.5 m ahead
        assert fixation_shortest_path_action(s, Pose(5, 5, 0)) == MOVE_FORWARD
        wide = scene_with(np.zeros((10, 40), dtype=bool), [(25, 4)])
        assert distance_to(wide, Pose(5, 4, 0)) == pytest.approx(5.0)
        assert fixation_shortest_path_action(wide, Pose(5, 4, 0)) == MOVE_FORWARD

    def test_right_of_heading_turns_right(self):
        s = open_scene([(5, 2)])
        assert bearing_to(s, Pose(5, 10, 0)) == pytest.approx(-90.0)
        assert fixation_shortest_path_action(s, Pose(5, 10, 0)) == TURN_RIGHT

    def test_left_of_heading_turns_left(self):
        s = open_scene([(5, 17)])
        assert fixation_shortest_path_action(s, Pose(5, 10, 0)) == TURN_LEFT

    def test_behind_tie_breaks_left(self):
        s = open_scene([(2, 10)])
        assert abs(bearing_to(s, Pose(10, 10, 0))) == pytest.approx(180.0)
        assert fixation_shortest_path_action(s, Pose(10, 10, 0)) == TURN_LEFT

    def test_holds_near_target(self):
        s = open_scene([(8, 5)])
        a = fixation_shortest_path_action(s, Pose(5, 5, 0))   # 0.75 m
        assert a in (TURN_LEFT, TURN_RIGHT)

    def test_progress_properties(self):
        cfg = WorldConfig()
        for seed in range(30):
            s = generate_scene(seed, cfg)
            rng = np.random.default_rng(seed)
            p, _ = sample_start(s, rng, cfg, require_visible=False)
            for _ in range(40):
                a = fixation_shortest_path_action(s, p)
                nxt = step(s, p, a)
                err = abs(bearing_to(s, p))
                if a != MOVE_FORWARD and err > FIXATION_TOL_DEG:
                    assert abs(bearing_to(s, nxt)) < err
                if a == MOVE_FORWARD:
                    assert distance_to(s, nxt) <= distance_to(s, p) + 1e-12
                p = nxt


def test_ascii_dump():
    s = open_scene([(10, 5)])
    txt = ascii_dump(s, Pose(5, 5, 0))
    lines = txt.splitlines()
    assert len(lines) == 20 and all(len(r) == 20 for r in lines)
    row = lines[20 - 1 - 5]
    assert row[5] == "@" and row[6] == ">" and row[10] == "T"
    assert lines[0] == "#" * 20
