"""Procedural partially-observed mazes and mirrored forward/backward episodes.

Cells are stored as small integers: ``WALL`` (0), ``EMPTY`` (1) and markers
(``MARKER_BASE + color_index``). The agent moves with the four compass actions
and sees a 7x7 cell window centred on itself, rasterised to a 32x32 RGB image.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WALL = 0
EMPTY = 1
MARKER_BASE = 2

VIEW = 7
CELL_PX = 4
IMAGE_SIZE = 32
_PAD = (IMAGE_SIZE - VIEW * CELL_PX) // 2

# Standard MiniGrid object colours (8-bit RGB).
PALETTE: tuple[tuple[int, int, int], ...] = (
    (255, 0, 0),      # red
    (0, 255, 0),      # green
    (0, 0, 255),      # blue
    (112, 39, 195),   # purple
    (255, 255, 0),    # yellow
    (100, 100, 100),  # grey
)
PALETTE_NAMES = ("red", "green", "blue", "purple", "yellow", "grey")
WALL_RGB = (200, 200, 200)
EMPTY_RGB = (0, 0, 0)
AGENT_RGB = (255, 255, 255)
AGENT_GLYPH = np.array(
    [[0, 0, 0, 0],
     [0, 1, 1, 0],
     [1, 1, 1, 1],
     [0, 0, 0, 0]],
    dtype=bool,
)


class Action(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3

    @property
    def delta(self) -> tuple[int, int]:
        return _DELTAS[self]

    def inverse(self) -> "Action":
        return Action((self + 2) % 4)


_DELTAS = {Action.N: (-1, 0), Action.E: (0, 1), Action.S: (1, 0), Action.W: (0, -1)}


class MazeError(ValueError):
    pass


@dataclass(frozen=True)
class MazeSpec:
    size: int = 85
    marker_count: int = 360
    difficulty: int = 4
    palette: tuple[tuple[int, int, int], ...] = PALETTE
    seed: int = 0

    def __post_init__(self):
        if self.size < 7 or self.size % 2 == 0:
            raise MazeError(f"maze size must be odd and >= 7, got {self.size}")
        if not 1 <= self.difficulty <= 5:
            raise MazeError(f"difficulty must be in [1, 5], got {self.difficulty}")
        if self.marker_count < 0:
            raise MazeError("marker_count must be non-negative")
        if len(self.palette) < 6 or len(set(map(tuple, self.palette))) != len(self.palette):
            raise MazeError("palette needs at least 6 distinct colours")

    def with_seed(self, seed: int) -> "MazeSpec":
        return MazeSpec(self.size, self.marker_count, self.difficulty, self.palette, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MazeSpec":
        d = dict(d)
        if "palette" in d:
            d["palette"] = tuple(tuple(int(v) for v in c) for c in d["palette"])
        return cls(**d)


@dataclass
class Episode:
    frames: np.ndarray          # (T, H, W, 3) uint8
    actions: list[Action]       # T - 1
    poses: list[tuple[int, int]]
    meta: dict = field(default_factory=dict)
    grid: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.frames) == len(self.actions) + 1 == len(self.poses)):
            raise ValueError("episode needs |frames| = |actions| + 1 = |poses|")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def midpoint(self) -> int:
        return int(self.meta.get("midpoint", (len(self.frames) - 1) // 2))

    @property
    def observations(self) -> np.ndarray:
        """Frames as float32 in [0, 1]."""
        return self.frames.astype(np.float32) / 255.0

    def action_codes(self) -> np.ndarray:
        return np.asarray([int(a) for a in self.actions], dtype=np.int64)


# ----------------------------------------------------------------------------
# maze generation


def _neighbours(r: int, c: int):
    for a in Action:
        dr, dc = a.delta
        yield a, r + dr, c + dc


def generate_maze(spec: MazeSpec) -> np.ndarray:
    """Recursive-backtracker maze with a difficulty-dependent share of walls knocked out.

    Difficulty 5 keeps the perfect maze, difficulty 1 removes every interior wall.
    """
    n = spec.size
    rng = np.random.default_rng(spec.seed)
    grid = np.full((n, n), WALL, dtype=np.int8)

    cells = [(r, c) for r in range(1, n - 1, 2) for c in range(1, n - 1, 2)]
    start = cells[rng.integers(len(cells))]
    grid[start] = EMPTY
    stack = [start]
    while stack:
        r, c = stack[-1]
        options = [
            (r + 2 * dr, c + 2 * dc)
            for dr, dc in _DELTAS.values()
            if 0 < r + 2 * dr < n - 1 and 0 < c + 2 * dc < n - 1 and grid[r + 2 * dr, c + 2 * dc] == WALL
        ]
        if not options:
            stack.pop()
            continue
        nr, nc = options[rng.integers(len(options))]
        grid[(r + nr) // 2, (c + nc) // 2] = EMPTY
        grid[nr, nc] = EMPTY
        stack.append((nr, nc))

    interior = [(r, c) for r in range(1, n - 1) for c in range(1, n - 1) if grid[r, c] == WALL]
    n_remove = int(round(len(interior) * (5 - spec.difficulty) / 4))
    order = rng.permutation(len(interior))
    pending = [interior[i] for i in order]
    removed = 0
    # A wall is only knocked out when it touches open floor, so connectivity is preserved.
    while removed < n_remove and pending:
        deferred = []
        for r, c in pending:
            if removed >= n_remove:
                break
            if any(grid[rr, cc] != WALL for _, rr, cc in _neighbours(r, c)):
                grid[r, c] = EMPTY
                removed += 1
            else:
                deferred.append((r, c))
        if len(deferred) == len(pending):
            break
        pending = deferred

    free = np.argwhere(grid == EMPTY)
    if spec.marker_count > len(free):
        raise MazeError(f"cannot place {spec.marker_count} markers on {len(free)} empty cells")
    picks = rng.choice(len(free), size=spec.marker_count, replace=False)
    colors = rng.integers(0, len(spec.palette), size=spec.marker_count)
    for (r, c), k in zip(free[picks], colors):
        grid[r, c] = MARKER_BASE + k
    return grid


def is_connected(grid: np.ndarray) -> bool:
    free = np.argwhere(grid != WALL)
    if len(free) == 0:
        return True
    dist = bfs_distances(grid, tuple(free[0]))
    return bool(np.all(dist[grid != WALL] >= 0))


def bfs_distances(grid: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    dist = np.full(grid.shape, -1, dtype=np.int64)
    dist[start] = 0
    q = deque([start])
    while q:
        r, c = q.popleft()
        for _, rr, cc in _neighbours(r, c):
            if 0 <= rr < grid.shape[0] and 0 <= cc < grid.shape[1] and grid[rr, cc] != WALL and dist[rr, cc] < 0:
                dist[rr, cc] = dist[r, c] + 1
                q.append((rr, cc))
    return dist


# ----------------------------------------------------------------------------
# movement


def step(grid: np.ndarray, pose: tuple[int, int], action: Action) -> tuple[int, int]:
    dr, dc = Action(action).delta
    r, c = pose[0] + dr, pose[1] + dc
    if 0 <= r < grid.shape[0] and 0 <= c < grid.shape[1] and grid[r, c] != WALL:
        return (r, c)
    return tuple(pose)


def mirror_actions(actions: Sequence[Action]) -> list[Action]:
    return [Action(a).inverse() for a in reversed(actions)]


def replay(grid: np.ndarray, start: tuple[int, int], actions: Iterable[Action]) -> list[tuple[int, int]]:
    poses = [tuple(start)]
    for a in actions:
        poses.append(step(grid, poses[-1], a))
    return poses


def shortest_path(grid: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> list[Action]:
    """BFS path; ties go to the first direction in N, E, S, W order."""
    start, goal = tuple(start), tuple(goal)
    if start == goal:
        return []
    parent: dict[tuple[int, int], tuple[tuple[int, int], Action]] = {start: (start, Action.N)}
    q = deque([start])
    while q:
        cur = q.popleft()
        if cur == goal:
            break
        for a, rr, cc in _neighbours(*cur):
            nxt = (rr, cc)
            if 0 <= rr < grid.shape[0] and 0 <= cc < grid.shape[1] and grid[nxt] != WALL and nxt not in parent:
                parent[nxt] = (cur, a)
                q.append(nxt)
    if goal not in parent:
        raise MazeError(f"no path from {start} to {goal}")
    path = []
    node = goal
    while node != start:
        node, a = parent[node]
        path.append(a)
    return path[::-1]


def _marker_sampler(markers: np.ndarray, rng: np.random.Generator):
    order = list(rng.permutation(len(markers)))
    while order:
        yield tuple(markers[order.pop(0)])
    while True:
        yield tuple(markers[rng.integers(len(markers))])


def plan_marker_tour(
    grid: np.ndarray,
    start: tuple[int, int],
    n_markers: int,
    rng: np.random.Generator | int | None = None,
) -> list[Action]:
    """Concatenated shortest paths to ``n_markers`` randomly drawn markers.

    Markers are drawn without replacement until all have been used, then with
    replacement.
    """
    if n_markers < 1:
        raise MazeError("n_markers must be >= 1")
    markers = np.argwhere(grid >= MARKER_BASE)
    if len(markers) == 0:
        raise MazeError("grid has no markers")
    rng = np.random.default_rng(rng)
    sampler = _marker_sampler(markers, rng)
    pose = tuple(start)
    actions: list[Action] = []
    for _ in range(n_markers):
        target = next(sampler)
        actions += shortest_path(grid, pose, target)
        pose = target
    return actions


# ----------------------------------------------------------------------------
# rendering


def cell_window(grid: np.ndarray, pose: tuple[int, int], view: int = VIEW) -> np.ndarray:
    """``view x view`` cells centred on ``pose``; cells beyond the border read as wall."""
    h = view // 2
    r, c = pose
    out = np.full((view, view), WALL, dtype=np.int8)
    r0, r1 = max(r - h, 0), min(r + h + 1, grid.shape[0])
    c0, c1 = max(c - h, 0), min(c + h + 1, grid.shape[1])
    out[r0 - (r - h):r1 - (r - h), c0 - (c - h):c1 - (c - h)] = grid[r0:r1, c0:c1]
    return out


def _color_table(palette: Sequence[tuple[int, int, int]]) -> np.ndarray:
    table = np.zeros((MARKER_BASE + len(palette), 3), dtype=np.uint8)
    table[WALL] = WALL_RGB
    table[EMPTY] = EMPTY_RGB
    table[MARKER_BASE:] = np.asarray(palette, dtype=np.uint8)
    return table


def render_window(window: np.ndarray, palette: Sequence[tuple[int, int, int]] = PALETTE) -> np.ndarray:
    table = _color_table(palette)
    img = table[window.astype(np.int64)]
    img = np.repeat(np.repeat(img, CELL_PX, axis=0), CELL_PX, axis=1)
    h = window.shape[0] // 2
    agent = img[h * CELL_PX:(h + 1) * CELL_PX, h * CELL_PX:(h + 1) * CELL_PX]
    agent[AGENT_GLYPH] = AGENT_RGB
    out = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    out[:] = WALL_RGB
    out[_PAD:_PAD + img.shape[0], _PAD:_PAD + img.shape[1]] = img
    return out


def render_observation_u8(grid: np.ndarray, pose: tuple[int, int],
                          palette: Sequence[tuple[int, int, int]] = PALETTE) -> np.ndarray:
    return render_window(cell_window(grid, pose), palette)


def render_observation(grid: np.ndarray, pose: tuple[int, int],
                       palette: Sequence[tuple[int, int, int]] = PALETTE) -> np.ndarray:
    """32x32x3 float32 image in [0, 1]."""
    return render_observation_u8(grid, pose, palette).astype(np.float32) / 255.0


def window_pixels(row: int, col: int) -> tuple[slice, slice]:
    """Pixel slices of cell (row, col) of the 7x7 window inside a rendered frame."""
    return (slice(_PAD + row * CELL_PX, _PAD + (row + 1) * CELL_PX),
            slice(_PAD + col * CELL_PX, _PAD + (col + 1) * CELL_PX))


# ----------------------------------------------------------------------------
# episodes

FORWARD_STEPS = 50
TOUR_MARKERS = 40


def build_episode(spec: MazeSpec, seed: int | None = None, forward_steps: int = FORWARD_STEPS,
                  tour_markers: int = TOUR_MARKERS) -> Episode:
    """Marker tour truncated or padded to ``forward_steps`` moves, followed by its mirror."""
    if seed is not None:
        spec = spec.with_seed(seed)
    grid = generate_maze(spec)
    rng = np.random.default_rng([spec.seed, 1])
    free = np.argwhere(grid != WALL)
    start = tuple(int(v) for v in free[rng.integers(len(free))])

    forward = plan_marker_tour(grid, start, tour_markers, rng)
    if len(forward) < forward_steps:
        markers = np.argwhere(grid >= MARKER_BASE)
        pose = replay(grid, start, forward)[-1]
        stalled = 0
        while len(forward) < forward_steps:
            target = tuple(markers[rng.integers(len(markers))])
            leg = shortest_path(grid, pose, target)
            stalled = stalled + 1 if not leg else 0
            if stalled > 100:
                raise MazeError("marker tour cannot reach the requested episode length")
            forward += leg
            pose = target
    forward = forward[:forward_steps]
    actions = forward + mirror_actions(forward)
    poses = replay(grid, start, actions)
    frames = np.stack([render_observation_u8(grid, p, spec.palette) for p in poses])
    meta = {"spec": spec.to_dict(), "seed": spec.seed, "midpoint": forward_steps}
    return Episode(frames, actions, poses, meta, grid)


def slice_context(episode: Episode, length: int) -> Episode:
    """Window of ``length + 1`` observations centred on the episode midpoint."""
    if length % 2 or length < 2:
        raise ValueError(f"context length must be even and positive, got {length}")
    mid = episode.midpoint
    lo, hi = mid - length // 2, mid + length // 2
    if lo < 0 or hi >= len(episode):
        raise ValueError(f"context {length} does not fit an episode of {len(episode)} frames")
    meta = dict(episode.meta, midpoint=length // 2, context=length, offset=lo)
    return Episode(episode.frames[lo:hi + 1], episode.actions[lo:hi], episode.poses[lo:hi + 1], meta, episode.grid)


SIMPLE_ROOM = 15
SIMPLE_STEPS = 3
SIMPLE_SIZE = 34


def simple_layouts() -> list[tuple[Action, int]]:
    return [(a, lateral) for a in Action for lateral in (-1, 0, 1)]


def build_simple_episode(direction: Action, lateral: int, color: int,
                         palette: Sequence[tuple[int, int, int]] = PALETTE) -> Episode:
    """Open room; a marker sits on the far edge of the view behind the agent.

    The agent walks three cells away (the marker leaves the view after the first
    step) and walks back, so the marker is only visible in the first and last frame.
    """
    n = SIMPLE_ROOM
    grid = np.full((n, n), EMPTY, dtype=np.int8)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = WALL
    start = (n // 2, n // 2)
    dr, dc = Action(direction).delta
    back = VIEW // 2
    # lateral offset is perpendicular to the walking direction
    mr = start[0] - dr * back + (lateral if dr == 0 else 0)
    mc = start[1] - dc * back + (lateral if dc == 0 else 0)
    grid[mr, mc] = MARKER_BASE + color
    forward = [Action(direction)] * SIMPLE_STEPS
    actions = forward + mirror_actions(forward)
    poses = replay(grid, start, actions)
    frames = np.stack([render_observation_u8(grid, p, palette) for p in poses])
    wr, wc = mr - start[0] + back, mc - start[1] + back
    meta = {"midpoint": SIMPLE_STEPS, "marker_cell": [int(wr), int(wc)], "color": int(color),
            "direction": Action(direction).name, "lateral": int(lateral)}
    return Episode(frames, actions, poses, meta, grid)


def build_simple_dataset(size: int = SIMPLE_SIZE, seed: int = 0) -> list[Episode]:
    combos = [(a, lat, k) for a, lat in simple_layouts() for k in range(len(PALETTE))]
    rng = np.random.default_rng(seed)
    picks = rng.permutation(len(combos))[:size]
    # keep colours balanced: sort picks so every colour appears ~size/6 times
    chosen = sorted((combos[i] for i in picks), key=lambda x: (x[2], x[0], x[1]))
    return [build_simple_episode(a, lat, k) for a, lat, k in chosen]


# ----------------------------------------------------------------------------
# archive I/O


def save_episode(episode: Episode, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t, h, w, _ = episode.frames.shape
    manifest = {
        "meta": episode.meta,
        "dims": [int(t), int(h), int(w), 3],
        "midpoint": episode.midpoint,
        "palette": [list(c) for c in PALETTE],
        "poses": [list(map(int, p)) for p in episode.poses],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (path / "frames.rgb8").write_bytes(np.ascontiguousarray(episode.frames, dtype=np.uint8).tobytes())
    (path / "actions.json").write_text(json.dumps([Action(a).name for a in episode.actions]))
    if episode.grid is not None:
        np.save(path / "grid.npy", episode.grid, allow_pickle=False)


def load_episode(path: str | Path) -> Episode:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    dims = manifest["dims"]
    frames = np.frombuffer((path / "frames.rgb8").read_bytes(), dtype=np.uint8).reshape(dims).copy()
    actions = [Action[a] for a in json.loads((path / "actions.json").read_text())]
    poses = [tuple(p) for p in manifest["poses"]]
    grid_path = path / "grid.npy"
    grid = np.load(grid_path) if grid_path.exists() else None
    return Episode(frames, actions, poses, manifest["meta"], grid)


def save_dataset(episodes: Sequence[Episode], root: str | Path, info: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ep in enumerate(episodes):
        name = f"ep{i:05d}"
        save_episode(ep, root / name)
        names.append(name)
    index = {"episodes": names, "info": info or {}}
    (root / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1))


def load_dataset(root: str | Path) -> list[Episode]:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    return [load_episode(root / name) for name in index["episodes"]]
