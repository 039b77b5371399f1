import heapq

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memdiff.gridworld import (
    EMPTY, MARKER_BASE, PALETTE, WALL, Action, MazeError, MazeSpec, build_episode,
    build_simple_dataset, cell_window, generate_maze, is_connected, load_dataset, mirror_actions,
    plan_marker_tour, render_observation, replay, save_dataset, slice_context, step,
)

N, E, S, W = Action.N, Action.E, Action.S, Action.W


def dijkstra(grid, start, goal):
    dist = {tuple(start): 0}
    pq = [(0, tuple(start))]
    while pq:
        d, (r, c) = heapq.heappop(pq)
        if (r, c) == tuple(goal):
            return d
        if d > dist[(r, c)]:
            continue
        for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1)):
            nr, nc = r + dr, c + dc
            if grid[nr, nc] != WALL and d + 1 < dist.get((nr, nc), 1 << 30):
                dist[(nr, nc)] = d + 1
                heapq.heappush(pq, (d + 1, (nr, nc)))
    raise AssertionError("unreachable")


def corridor(length=7):
    g = np.full((3, length + 2), WALL, dtype=np.int8)
    g[1, 1:-1] = EMPTY
    return g


class TestMaze:
    def test_large_scale_maze(self):
        g = generate_maze(MazeSpec(size=85, marker_count=360, difficulty=4, seed=3))
        assert g.shape == (85, 85)
        assert (g >= MARKER_BASE).sum() == 360
        assert is_connected(g)

    def test_minimal_open_room(self):
        g = generate_maze(MazeSpec(size=7, marker_count=0, difficulty=1, seed=5))
        assert (g[1:-1, 1:-1] == EMPTY).all()
        assert (g[0] == WALL).all() and (g[-1] == WALL).all()
        assert (g[:, 0] == WALL).all() and (g[:, -1] == WALL).all()

    def test_determinism_and_seed_sensitivity(self):
        spec = MazeSpec(size=21, marker_count=60, difficulty=3)
        for s in range(100):
            a = generate_maze(spec.with_seed(s))
            assert np.array_equal(a, generate_maze(spec.with_seed(s)))
            assert not np.array_equal(a, generate_maze(spec.with_seed(s + 1000)))

    def test_wall_density_monotone_in_difficulty(self):
        for seed in range(5):
            dens = [(generate_maze(MazeSpec(21, 0, d, seed=seed)) == WALL).mean() for d in range(1, 6)]
            assert all(x <= y for x, y in zip(dens, dens[1:]))

    def test_too_many_markers(self):
        with pytest.raises(MazeError):
            generate_maze(MazeSpec(size=7, marker_count=26, difficulty=1))

    @pytest.mark.parametrize("kw", [dict(size=8), dict(size=5), dict(difficulty=0), dict(difficulty=6)])
    def test_bad_spec(self, kw):
        with pytest.raises(MazeError):
            MazeSpec(**kw)

    def test_marker_colors_from_palette(self):
        g = generate_maze(MazeSpec(21, 100, 2, seed=1))
        vals = g[g >= MARKER_BASE] - MARKER_BASE
        assert set(np.unique(vals)) <= set(range(len(PALETTE)))


class TestMovement:
    def test_step(self):
        g = np.full((5, 5), WALL, dtype=np.int8)
        g[1:4, 2] = EMPTY
        assert step(g, (2, 2), N) == (1, 2)
        assert step(g, (1, 2), N) == (1, 2)
        assert step(g, (2, 2), E) == (2, 2)

    def test_mirror_examples(self):
        assert mirror_actions([N, N, E]) == [W, S, S]
        assert mirror_actions([]) == []

    def test_inverse_is_involution(self):
        for a in Action:
            assert a.inverse().inverse() == a
        assert sorted(a.inverse() for a in Action) == list(Action)

    def test_round_trip_random(self):
        g = np.full((41, 41), EMPTY, dtype=np.int8)
        g[0, :] = g[-1, :] = g[:, 0] = g[:, -1] = WALL
        rng = np.random.default_rng(0)
        for _ in range(1000):
            acts = [Action(int(a)) for a in rng.integers(0, 4, rng.integers(0, 30))]
            poses = replay(g, (20, 20), acts + mirror_actions(acts))
            assert poses[-1] == (20, 20)


class TestTour:
    def test_corridor(self):
        g = corridor()
        g[1, 4] = MARKER_BASE
        assert plan_marker_tour(g, (1, 1), 1, 0) == [E, E, E]

    def test_marker_on_start(self):
        g = corridor()
        g[1, 1] = MARKER_BASE
        assert plan_marker_tour(g, (1, 1), 3, 0) == []

    def test_no_markers(self):
        with pytest.raises(MazeError):
            plan_marker_tour(corridor(), (1, 1), 1)

    def test_path_length_matches_dijkstra(self):
        for seed in range(5):
            g = generate_maze(MazeSpec(21, 30, 3, seed=seed))
            start = tuple(np.argwhere(g != WALL)[0])
            n = 12
            # replay the planner's marker draws to know the targets
            from memdiff.gridworld import _marker_sampler
            sampler = _marker_sampler(np.argwhere(g >= MARKER_BASE), np.random.default_rng(seed))
            targets = [next(sampler) for _ in range(n)]
            acts = plan_marker_tour(g, start, n, seed)
            expected, pos = 0, start
            for tgt in targets:
                expected += dijkstra(g, pos, tgt)
                pos = tgt
            assert len(acts) == expected
            poses = replay(g, start, acts)
            assert poses[-1] == targets[-1]
            # the planner never bumps into walls
            assert all(p != q for p, q in zip(poses, poses[1:]))


class TestRendering:
    def test_range_and_determinism(self):
        g = generate_maze(MazeSpec(21, 60, 3, seed=0))
        pose = tuple(np.argwhere(g != WALL)[3])
        a, b = render_observation(g, pose), render_observation(g, pose)
        assert a.shape == (32, 32, 3) and a.dtype == np.float32
        assert 0 <= a.min() and a.max() <= 1
        assert np.array_equal(a, b)

    def test_outside_grid_is_wall(self):
        g = np.full((7, 7), EMPTY, dtype=np.int8)
        w = cell_window(g, (0, 0))
        assert (w[:3] == WALL).all() and (w[:, :3] == WALL).all()

    def test_shift_after_east_step(self):
        ep = build_episode(MazeSpec(21, 60, 3), seed=2)
        for t, a in enumerate(ep.actions):
            w0 = cell_window(ep.grid, ep.poses[t])
            w1 = cell_window(ep.grid, ep.poses[t + 1])
            if a == E:
                assert np.array_equal(w1[:, :6], w0[:, 1:])
            elif a == W:
                assert np.array_equal(w1[:, 1:], w0[:, :6])
            elif a == N:
                assert np.array_equal(w1[1:], w0[:6])
            else:
                assert np.array_equal(w1[:6], w0[1:])


class TestEpisodes:
    def test_canonical_episode(self):
        ep = build_episode(MazeSpec(21, 60, 3), seed=11)
        assert len(ep.frames) == 101 and len(ep.actions) == 100 and len(ep.poses) == 101
        for k in range(1, 51):
            assert np.array_equal(ep.frames[50 + k], ep.frames[50 - k])
            assert ep.poses[50 + k] == ep.poses[50 - k]
        assert replay(ep.grid, ep.poses[0], ep.actions) == ep.poses

    def test_short_tour_is_padded(self):
        # few, close markers: 40 legs cannot fill 50 steps without padding
        ep = build_episode(MazeSpec(9, 2, 1), seed=4)
        assert len(ep.actions) == 100

    def test_determinism(self):
        a = build_episode(MazeSpec(21, 60, 3), seed=9)
        b = build_episode(MazeSpec(21, 60, 3), seed=9)
        assert a.frames.tobytes() == b.frames.tobytes() and a.actions == b.actions

    def test_slice_context(self):
        ep = build_episode(MazeSpec(21, 60, 3), seed=1)
        assert np.array_equal(slice_context(ep, 100).frames, ep.frames)
        s = slice_context(ep, 16)
        assert len(s) == 17 and np.array_equal(s.frames, ep.frames[42:59])
        s50 = slice_context(ep, 50)
        assert len(s50) == 51
        for k in range(1, 26):
            assert np.array_equal(s50.frames[25 + k], s50.frames[25 - k])
        with pytest.raises(ValueError):
            slice_context(ep, 102)
        with pytest.raises(ValueError):
            slice_context(ep, 15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
    def test_mirror_property(self, seed, difficulty):
        ep = build_episode(MazeSpec(15, 20, difficulty), seed=seed)
        mid = ep.midpoint
        assert all(np.array_equal(ep.frames[mid + k], ep.frames[mid - k]) for k in range(1, mid + 1))
        assert is_connected(ep.grid)


class TestSimple:
    def test_dataset(self):
        ds = build_simple_dataset()
        assert len(ds) == 34
        combos = {(ep.meta["color"], ep.meta["direction"], ep.meta["lateral"]) for ep in ds}
        assert len(combos) == 34
        for ep in ds:
            assert len(ep.frames) == 7
            assert np.array_equal(ep.frames[0], ep.frames[6])
            marker = MARKER_BASE + ep.meta["color"]
            assert (cell_window(ep.grid, ep.poses[0]) == marker).sum() == 1
            for t in range(1, 6):
                assert not (cell_window(ep.grid, ep.poses[t]) == marker).any()

    def test_deterministic(self):
        a, b = build_simple_dataset(), build_simple_dataset()
        assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a, b))


def test_archive_round_trip(tmp_path):
    eps = [build_episode(MazeSpec(15, 10, 3), seed=s) for s in range(3)]
    save_dataset(eps, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    raw = (tmp_path / "ds" / "ep00000" / "frames.rgb8").read_bytes()
    assert len(raw) == 101 * 32 * 32 * 3
    for a, b in zip(eps, back):
        assert np.array_equal(a.frames, b.frames)
        assert a.actions == b.actions and a.poses == b.poses
