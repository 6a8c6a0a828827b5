"""Procedural 11x11 gridworlds: topologies, pattern maps, egocentric observations,
dataset collection and the goal-directed navigation task.

Observation channels are ``(red, green, wall)``. Model inputs use the row-major
flattening of the 5x5x3 window, a 75-dim vector.
"""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

GRID = 11
WINDOW = 5
RADIUS = WINDOW // 2
OBS_DIM = WINDOW * WINDOW * 3

NONE, RED, GREEN = 0, 1, 2


class TopologyKind(str, enum.Enum):
    OPEN = "Open"
    ROOMS = "Rooms"
    RING = "Ring"
    HALLWAY = "Hallway"

    @classmethod
    def parse(cls, value) -> "TopologyKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if str(value).lower() in (kind.value.lower(), kind.name.lower()):
                return kind
        raise ValueError(f"unknown topology kind: {value!r}")


ALL_KINDS = tuple(TopologyKind)

# Shortest start->goal path length per topology, both goal phases.
OPTIMAL_STEPS = {
    TopologyKind.OPEN: 5,
    TopologyKind.ROOMS: 7,
    TopologyKind.RING: 5,
    TopologyKind.HALLWAY: 5,
}


class Action(enum.IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


N_ACTIONS = 4
_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass(frozen=True)
class Topology:
    kind: Optional[TopologyKind]
    walls: np.ndarray = field(repr=False)

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=bool)
        if walls.shape != (GRID, GRID):
            raise ValueError(f"walls must be {GRID}x{GRID}, got {walls.shape}")
        if not (walls[0].all() and walls[-1].all() and walls[:, 0].all() and walls[:, -1].all()):
            raise ValueError("outer border must be wall")
        walls.setflags(write=False)
        object.__setattr__(self, "walls", walls)
        free = self.free_cells()
        if not free:
            raise ValueError("topology has no free cells")
        if len(bfs_distances(self, free[0])) != len(free):
            raise ValueError("free cells are not connected")

    @property
    def name(self) -> str:
        return self.kind.value if self.kind is not None else "Custom"

    def is_free(self, pos) -> bool:
        r, c = pos
        return 0 <= r < GRID and 0 <= c < GRID and not self.walls[r, c]

    def free_cells(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(~self.walls))]

    @property
    def n_free(self) -> int:
        return int((~self.walls).sum())


def build_topology(kind) -> Topology:
    kind = TopologyKind.parse(kind)
    walls = np.zeros((GRID, GRID), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    if kind is TopologyKind.ROOMS:
        walls[5, :] = True
        walls[:, 5] = True
        for r, c in ((5, 2), (5, 8), (2, 5), (8, 5)):
            walls[r, c] = False
    elif kind is TopologyKind.RING:
        walls[4:7, 4:7] = True
    elif kind is TopologyKind.HALLWAY:
        for r0 in (2, 7):
            for c0 in (2, 7):
                walls[r0:r0 + 2, c0:c0 + 2] = True
    return Topology(kind, walls)


def bfs_distances(topology: Topology, start) -> dict[tuple[int, int], int]:
    start = tuple(start)
    dist = {start: 0}
    queue = deque([start])
    while queue:
        pos = queue.popleft()
        for a in range(N_ACTIONS):
            nxt = step_dynamics(pos, a, topology)
            if nxt not in dist:
                dist[nxt] = dist[pos] + 1
                queue.append(nxt)
    return dist


def bfs_optimal_action(topology: Topology, pos, goal) -> Action:
    """First action of a shortest path from ``pos`` to ``goal`` (lowest index on ties)."""
    dist = bfs_distances(topology, goal)
    best = min(range(N_ACTIONS), key=lambda a: (dist[step_dynamics(pos, a, topology)], a))
    return Action(best)


def step_dynamics(pos, action, topology: Topology) -> tuple[int, int]:
    dr, dc = _DELTAS[int(action)]
    nxt = (pos[0] + dr, pos[1] + dc)
    if topology.is_free(nxt):
        return nxt
    return (pos[0], pos[1])


@dataclass(frozen=True)
class PatternMap:
    colors: np.ndarray = field(repr=False)
    map_id: int = -1

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.uint8)
        colors.setflags(write=False)
        object.__setattr__(self, "colors", colors)


def generate_pattern_map(topology: Topology, seed, map_id: int = -1) -> PatternMap:
    rng = np.random.default_rng(seed)
    colors = np.where(rng.random((GRID, GRID)) < 0.5, RED, GREEN).astype(np.uint8)
    colors[topology.walls] = NONE
    return PatternMap(colors, map_id)


def render_observation(topology: Topology, pattern: PatternMap, pos) -> np.ndarray:
    """5x5x3 window centred on ``pos``; cells beyond the grid render as wall."""
    r, c = pos
    obs = np.zeros((WINDOW, WINDOW, 3), dtype=np.uint8)
    obs[:, :, 2] = 1
    r0, r1 = max(r - RADIUS, 0), min(r + RADIUS + 1, GRID)
    c0, c1 = max(c - RADIUS, 0), min(c + RADIUS + 1, GRID)
    colors = pattern.colors[r0:r1, c0:c1]
    walls = topology.walls[r0:r1, c0:c1]
    sub = obs[r0 - r + RADIUS:r1 - r + RADIUS, c0 - c + RADIUS:c1 - c + RADIUS]
    sub[:, :, 0] = colors == RED
    sub[:, :, 1] = colors == GREEN
    sub[:, :, 2] = walls
    return obs


def flatten_observation(obs: np.ndarray) -> np.ndarray:
    return np.asarray(obs, dtype=np.float64).reshape(-1)


def semi_random_policy(state, rng: np.random.Generator, p_repeat: float = 0.7) -> Action:
    """Sticky random walk: keep the previous action with probability ``p_repeat``."""
    _, prev = state
    if prev is not None and rng.random() < p_repeat:
        return Action(int(prev))
    return Action(int(rng.integers(N_ACTIONS)))


@dataclass
class Episode:
    map_id: int
    observations: np.ndarray  # (L, 5, 5, 3) uint8
    actions: np.ndarray  # (L,) uint8, action taken after observing step t
    positions: np.ndarray  # (L, 2) uint8

    def __len__(self):
        return len(self.actions)


@dataclass
class EpisodeDataset:
    topology_kind: Optional[TopologyKind]
    episode_length: int
    seed: int
    episodes: list[Episode]
    config_hash: str = ""

    def __len__(self):
        return len(self.episodes)

    def arrays(self, indices: Iterable[int]):
        """Time-major model inputs for ``indices``: obs (T,B,75), actions (T,B), positions (T,B,2)."""
        eps = [self.episodes[i] for i in indices]
        obs = np.stack([e.observations.reshape(len(e), -1) for e in eps], axis=1).astype(np.float64)
        actions = np.stack([e.actions for e in eps], axis=1).astype(np.int64)
        positions = np.stack([e.positions for e in eps], axis=1).astype(np.float64)
        return obs, actions, positions


def run_behaviour(topology: Topology, pattern: PatternMap, start, length: int,
                  rng: np.random.Generator, p_repeat: float = 0.7) -> Episode:
    pos = tuple(start)
    prev = None
    obs, acts, poss = [], [], []
    for _ in range(length):
        obs.append(render_observation(topology, pattern, pos))
        a = semi_random_policy((pos, prev), rng, p_repeat)
        acts.append(int(a))
        poss.append(pos)
        pos = step_dynamics(pos, a, topology)
        prev = a
    return Episode(pattern.map_id, np.stack(obs), np.array(acts, dtype=np.uint8),
                   np.array(poss, dtype=np.uint8))


def collect_dataset(topology: Topology, pattern_pool: list[PatternMap], n_episodes: int = 1000,
                    episode_len: int = 50, seed: int = 0, p_repeat: float = 0.7) -> EpisodeDataset:
    if not pattern_pool:
        raise ValueError("pattern_pool must be non-empty")
    free = topology.free_cells()
    episodes = []
    for i in range(n_episodes):
        rng = np.random.default_rng([seed, i])
        pattern = pattern_pool[int(rng.integers(len(pattern_pool)))]
        start = free[int(rng.integers(len(free)))]
        episodes.append(run_behaviour(topology, pattern, start, episode_len, rng, p_repeat))
    return EpisodeDataset(topology.kind, episode_len, seed, episodes)


# -- persistence -------------------------------------------------------------

_DS_MAGIC = b"DSWMDS01"
_DS_HEADER = struct.Struct("<8s16sBIIQ")
_KIND_CODES = {None: 255, **{k: i for i, k in enumerate(ALL_KINDS)}}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def save_dataset(dataset: EpisodeDataset, path) -> None:
    """Write ``dataset`` in the binary layout documented in docs/formats.md."""
    L = dataset.episode_length
    chunks = [_DS_HEADER.pack(_DS_MAGIC, dataset.config_hash.encode().ljust(16, b"\0")[:16],
                              _KIND_CODES[dataset.topology_kind], len(dataset), L, dataset.seed)]
    for ep in dataset.episodes:
        if len(ep) != L:
            raise ValueError("episode length mismatch")
        chunks.append(struct.pack("<I", ep.map_id))
        chunks.append(np.packbits(ep.observations.reshape(-1)).tobytes())
        chunks.append(ep.actions.astype(np.uint8).tobytes())
        chunks.append(ep.positions.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path) -> EpisodeDataset:
    raw = Path(path).read_bytes()
    magic, chash, kind, n, L, seed = _DS_HEADER.unpack_from(raw, 0)
    if magic != _DS_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    off = _DS_HEADER.size
    n_bits = L * OBS_DIM
    n_bytes = (n_bits + 7) // 8
    episodes = []
    for _ in range(n):
        (map_id,) = struct.unpack_from("<I", raw, off)
        off += 4
        bits = np.unpackbits(np.frombuffer(raw, np.uint8, n_bytes, off))[:n_bits]
        off += n_bytes
        actions = np.frombuffer(raw, np.uint8, L, off).copy()
        off += L
        positions = np.frombuffer(raw, np.uint8, 2 * L, off).reshape(L, 2).copy()
        off += 2 * L
        episodes.append(Episode(map_id, bits.reshape(L, WINDOW, WINDOW, 3), actions, positions))
    return EpisodeDataset(_CODE_KINDS[kind], L, seed, episodes, chash.rstrip(b"\0").decode())


_PM_MAGIC = b"DSWMPM01"
_PM_HEADER = struct.Struct("<8s16sBI")


def save_pattern_maps(maps: list[PatternMap], kind, path, config_hash: str = "") -> None:
    kind = None if kind is None else TopologyKind.parse(kind)
    chunks = [_PM_HEADER.pack(_PM_MAGIC, config_hash.encode().ljust(16, b"\0")[:16],
                              _KIND_CODES[kind], len(maps))]
    for m in maps:
        chunks.append(struct.pack("<I", m.map_id))
        chunks.append(m.colors.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_pattern_maps(path) -> list[PatternMap]:
    raw = Path(path).read_bytes()
    magic, _, _, n = _PM_HEADER.unpack_from(raw, 0)
    if magic != _PM_MAGIC:
        raise ValueError(f"{path}: not a pattern-map file")
    off = _PM_HEADER.size
    maps = []
    for _ in range(n):
        (map_id,) = struct.unpack_from("<I", raw, off)
        off += 4
        colors = np.frombuffer(raw, np.uint8, GRID * GRID, off).reshape(GRID, GRID).copy()
        off += GRID * GRID
        maps.append(PatternMap(colors, map_id))
    return maps


# -- goal-directed task ------------------------------------------------------

@dataclass(frozen=True)
class GoalTask:
    start: tuple[int, int]
    goal_phase1: tuple[int, int]
    goal_phase2: tuple[int, int]
    switch_episode: int = 50
    max_steps: int = 100
    reward_at_goal: float = 1.0

    def goal_for(self, episode: int) -> tuple[int, int]:
        return self.goal_phase1 if episode < self.switch_episode else self.goal_phase2

    def validate(self, topology: Topology, optimal: Optional[int] = None) -> None:
        for p in (self.start, self.goal_phase1, self.goal_phase2):
            if not topology.is_free(p):
                raise ValueError(f"{p} is a wall in {topology.name}")
        if optimal is not None:
            dist = bfs_distances(topology, self.start)
            for g in (self.goal_phase1, self.goal_phase2):
                if dist[tuple(g)] != optimal:
                    raise ValueError(f"BFS distance to {g} in {topology.name} is "
                                     f"{dist[tuple(g)]}, expected {optimal}")


def load_goal_task(kind, path=None) -> GoalTask:
    """Start/goal coordinates from the versioned goal-task file shipped with the package."""
    import yaml

    kind = TopologyKind.parse(kind)
    path = Path(path) if path else Path(__file__).parent / "data" / "goal_tasks.yaml"
    doc = yaml.safe_load(path.read_text())
    entry = doc["topologies"][kind.value]
    task = GoalTask(tuple(entry["start"]), tuple(entry["goal_phase1"]), tuple(entry["goal_phase2"]),
                    switch_episode=doc.get("switch_episode", 50), max_steps=doc.get("max_steps", 100))
    task.validate(build_topology(kind), OPTIMAL_STEPS[kind])
    return task


@dataclass
class EpisodeOutcome:
    trajectory: list[tuple[int, int]]
    actions: list[int]
    rewards: list[float]
    steps_to_goal: int

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


def goal_episode(task: GoalTask, topology: Topology, policy: Callable, episode: int = 0,
                 observer: Optional[Callable] = None) -> EpisodeOutcome:
    """Run one episode; ``policy(pos) -> action``.

    ``observer(pos, action, next_pos, reward, done)`` is called after every step.
    The episode ends on entering the active goal or after ``task.max_steps`` steps.
    """
    goal = task.goal_for(episode)
    pos = tuple(task.start)
    trajectory, actions, rewards = [pos], [], []
    for t in range(task.max_steps):
        a = int(policy(pos))
        nxt = step_dynamics(pos, a, topology)
        reached = nxt == goal
        r = task.reward_at_goal if reached else 0.0
        actions.append(a)
        rewards.append(r)
        trajectory.append(nxt)
        if observer is not None:
            observer(pos, a, nxt, r, reached)
        pos = nxt
        if reached:
            return EpisodeOutcome(trajectory, actions, rewards, t + 1)
    return EpisodeOutcome(trajectory, actions, rewards, task.max_steps)
