"""Successor-similarity RL: cosine Q-values over successor features, a set-based reward
vector, TD successor updates, and optional Dyna updates through a frozen DSWM."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .gridworld import (Action, GRID, GoalTask, PatternMap, Topology, flatten_observation,
                        render_observation, step_dynamics)
from .models.dswm import DSWM
from .models.world import WorldModel
from .numerics.ops import gumbel_noise, softmax_np

N_ACTIONS = 4
GAMMA = 0.99
ALPHA = 0.1
TAU = 0.001
ZERO_THRESHOLD = 0.9
COS_EPS = 1e-12


class BasisKind(str, Enum):
    WORLD = "WORLD"
    DSWM = "DSWM"
    ONEHOT = "ONEHOT"


@dataclass(frozen=True)
class DynaConfig:
    rollout_length: int = 5
    rollout_probability: float = 0.2

    def __post_init__(self):
        if self.rollout_length < 0:
            raise ValueError("rollout_length must be >= 0")
        if not 0.0 <= self.rollout_probability <= 1.0:
            raise ValueError("rollout_probability must be in [0, 1]")


# -- feature bases -----------------------------------------------------------

class FeatureBasis:
    """Maps (o_t, a_{t-1}, pos) to a nonnegative feature vector.

    The DSWM basis also keeps the live inference state (store, s sample, h) that
    Dyna rollouts start from.
    """

    def __init__(self, kind, model=None):
        self.kind = BasisKind(kind)
        self.model = model
        if self.kind is BasisKind.DSWM and not isinstance(model, DSWM):
            raise ValueError("DSWM basis needs a trained DSWM model")
        if self.kind is BasisKind.WORLD and not isinstance(model, WorldModel):
            raise ValueError("WORLD basis needs a trained world model")
        self.rng = np.random.default_rng(0)
        self._s = None
        self._z = None
        self._phi = None
        self.h = None
        self.store = None

    @property
    def dim(self) -> int:
        if self.kind is BasisKind.ONEHOT:
            return GRID * GRID
        if self.kind is BasisKind.DSWM:
            return self.model.config.s_total
        return self.model.config.z_total

    def reset(self, rng: np.random.Generator) -> None:
        """Start of an episode: empty store, zero hidden state."""
        self.rng = rng
        if self.kind is BasisKind.DSWM:
            self.store = self.model.new_store()
            self.h = self.model.initial_hidden(1)
            self._s = self._z = None

    def featurize(self, o_t, a_prev, pos) -> np.ndarray:
        if self.kind is BasisKind.ONEHOT:
            phi = np.zeros(GRID * GRID)
            phi[pos[0] * GRID + pos[1]] = 1.0
            return phi
        if self.kind is BasisKind.WORLD:
            logits = self.model.content_logits(o_t).data[0]
            return softmax_np(logits, self.model.config.z_groups)
        m = self.model
        noise = m.step_noise(self.rng)
        s_logits, self._s = m.encode_context(o_t, a_prev, noise["s"])
        _, self._z = m.encode_content(o_t, noise["z"])
        self._phi = softmax_np(s_logits.data[0], m.config.s_groups)
        return self._phi

    def commit(self, a_t) -> None:
        """Finish the DSWM inference step for the chosen action: write (s_t, z_t), advance h."""
        if self.kind is BasisKind.DSWM:
            self.store.write(self._s, self._z)
            self.h = self.model.advance(self._s, a_t, self.h)

    def live_state(self):
        """(s sample, h, φ) of the latest observation, the starting point for Dyna."""
        if self.kind is not BasisKind.DSWM:
            raise ValueError("only the DSWM basis has a generative context state")
        return self._s, self.h, self._phi


def onehot_feature(pos) -> np.ndarray:
    phi = np.zeros(GRID * GRID)
    phi[pos[0] * GRID + pos[1]] = 1.0
    return phi


# -- core rules --------------------------------------------------------------

def _cos_rows(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    na = np.sqrt(np.sum(a * a, axis=-1))
    nw = math.sqrt(float(w @ w))
    if nw < COS_EPS:
        return np.zeros(a.shape[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(na >= COS_EPS, (a @ w) / (na * nw), 0.0)


def cosine(a, b) -> float:
    return float(_cos_rows(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64))[0])


def successor_features(psi: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """ψ(s, a) = Ψ_a φ for all actions: (A, d)."""
    return psi @ phi


def q_values(psi: np.ndarray, w: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Q(s, a) = cos(Ψ_a φ, w); all zeros when w = 0."""
    return _cos_rows(successor_features(psi, phi), w)


def greedy_action(q: np.ndarray) -> int:
    """argmax with ties to the lowest action index."""
    return int(np.argmax(q))


def policy_probs(q, tau: float = TAU) -> np.ndarray:
    if tau <= 0:
        raise ValueError("policy temperature must be > 0")
    x = np.asarray(q, dtype=np.float64) / tau
    e = np.exp(x - x.max())
    return e / e.sum()


def policy_sample(q, tau: float = TAU, rng=None) -> int:
    """Sample an action from softmax(q / tau)."""
    p = policy_probs(q, tau)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))


def sf_td_update(psi: np.ndarray, phi_t, a_t: int, phi_next, a_max: Optional[int], gamma: float = GAMMA,
                 alpha: float = ALPHA, terminal: bool = False) -> np.ndarray:
    """In-place TD update of Ψ_{a_t} toward φ_t + γ Ψ_{a_max} φ_{t+1}.

    On a terminal transition the bootstrap is the arrival feature itself,
    φ_t + γ φ_{t+1}, since the episode ends in the goal state.
    """
    phi_t = np.asarray(phi_t, dtype=np.float64)
    if terminal:
        nxt = np.asarray(phi_next, dtype=np.float64)
    else:
        nxt = psi[a_max] @ phi_next
    delta = phi_t + gamma * nxt - psi[a_t] @ phi_t
    psi[a_t] += alpha * np.outer(delta, phi_t)
    return psi


def reward_update(w: np.ndarray, phi_next, r: float, q_predicted: Optional[float] = None):
    """Set rule: w = φ' on reward; zero w when a confident prediction (> 0.9) goes unrewarded.

    Returns ``(w, event)`` with event in {"set", "zeroed", None}.
    """
    if r not in (0, 1, 0.0, 1.0):
        raise ValueError(f"reward must be 0 or 1, got {r}")
    if r == 1:
        return np.array(phi_next, dtype=np.float64), "set"
    if q_predicted is None:
        q_predicted = cosine(phi_next, w)
    if q_predicted > ZERO_THRESHOLD:
        return np.zeros_like(w), "zeroed"
    return w, None


def dyna_rollout(psi: np.ndarray, w: np.ndarray, model: DSWM, start, config: DynaConfig = DynaConfig(),
                 tau: float = TAU, gamma: float = GAMMA, alpha: float = ALPHA, rng=None) -> int:
    """Imagined TD updates along a trajectory from the DSWM forward model.

    ``start`` is ``(s sample, h, φ)`` with φ the softmax feature of s. The GRU is fed
    gumbel samples while features are the softmax of the logits. ``w`` is only read.
    Returns the number of updates.
    """
    if not isinstance(model, DSWM):
        raise ValueError("Dyna rollouts need the DSWM forward model")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    s, h, phi = start
    groups = model.config.s_groups
    for _ in range(config.rollout_length):
        a = policy_sample(q_values(psi, w, phi), tau, rng)
        noise = gumbel_noise(rng, (1, model.config.s_total))
        h, logits, s = model.forward_context(s, a, h, noise)
        phi_next = softmax_np(logits.data[0], groups)
        a_max = greedy_action(q_values(psi, w, phi_next))
        sf_td_update(psi, phi, a, phi_next, a_max, gamma, alpha)
        phi = phi_next
    return config.rollout_length


# -- sessions ----------------------------------------------------------------

@dataclass
class AgentConfig:
    gamma: float = GAMMA
    alpha: float = ALPHA
    tau: float = TAU
    episodes: int = 100
    dyna: Optional[DynaConfig] = None


@dataclass
class SessionResult:
    basis: str
    topology: str
    seed: int
    steps: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (episode, step, pos, "set"/"zeroed")
    visits_old_goal: list = field(default_factory=list)  # (episode, step) after the switch
    dyna_calls: int = 0

    def final_stats(self, last: int = 20):
        x = np.asarray(self.steps[-last:], dtype=np.float64)
        return float(np.mean(x)), float(np.median(x))


def variant_name(basis: BasisKind, use_dyna: bool) -> str:
    return basis.value + ("+DYNA" if use_dyna else "")


def run_session(topology: Topology, task: GoalTask, basis: FeatureBasis, pattern: PatternMap, seed: int,
                config: AgentConfig = AgentConfig()) -> SessionResult:
    """One agent learning the goal task for ``config.episodes`` episodes.

    Ψ and w start at zero. Goal coordinates switch at ``task.switch_episode``.
    """
    use_dyna = config.dyna is not None
    if use_dyna and basis.kind is not BasisKind.DSWM:
        raise ValueError("Dyna requires the DSWM basis")
    d = basis.dim
    psi = np.zeros((N_ACTIONS, d, d))
    w = np.zeros(d)
    res = SessionResult(variant_name(basis.kind, use_dyna), topology.name, seed)
    old_goal = tuple(task.goal_phase1)
    for ep in range(config.episodes):
        rng = np.random.default_rng([seed, ep])
        basis.reset(np.random.default_rng([seed, ep, 1]))
        goal = tuple(task.goal_for(ep))
        pos, a_prev = tuple(task.start), None
        phi = basis.featurize(_obs(topology, pattern, pos), a_prev, pos)
        total, steps = 0.0, task.max_steps
        for t in range(task.max_steps):
            a = policy_sample(q_values(psi, w, phi), config.tau, rng)
            basis.commit(a)
            pos = step_dynamics(pos, Action(a), topology)
            r = 1.0 if pos == goal else 0.0
            total += r
            phi_next = basis.featurize(_obs(topology, pattern, pos), a, pos)
            if ep >= task.switch_episode and pos == old_goal and goal != old_goal:
                res.visits_old_goal.append((ep, t))
            w, event = reward_update(w, phi_next, r)
            if event:
                res.events.append((ep, t, pos, event))
            done = r == 1.0
            if done:
                sf_td_update(psi, phi, a, phi_next, None, config.gamma, config.alpha, terminal=True)
            else:
                a_max = greedy_action(q_values(psi, w, phi_next))
                sf_td_update(psi, phi, a, phi_next, a_max, config.gamma, config.alpha)
                if use_dyna and rng.random() < config.dyna.rollout_probability:
                    dyna_rollout(psi, w, basis.model, basis.live_state(), config.dyna, config.tau,
                                 config.gamma, config.alpha, rng)
                    res.dyna_calls += 1
            phi = phi_next
            if done:
                steps = t + 1
                break
        res.steps.append(steps)
        res.rewards.append(total)
    return res


def _obs(topology, pattern, pos):
    return flatten_observation(render_observation(topology, pattern, pos)).astype(np.float64)


def greedy_steps(psi, w, basis: FeatureBasis, topology, pattern, start, goal, max_steps=100) -> int:
    """Steps the greedy policy takes from start to goal (max_steps if it never arrives)."""
    basis.reset(np.random.default_rng(0))
    pos, a_prev = tuple(start), None
    for t in range(max_steps):
        a = greedy_action(q_values(psi, w, basis.featurize(_obs(topology, pattern, pos), a_prev, pos)))
        basis.commit(a)
        pos, a_prev = step_dynamics(pos, Action(a), topology), a
        if pos == tuple(goal):
            return t + 1
    return max_steps


def switch_report(res: SessionResult, task: GoalTask) -> dict:
    """Did w get zeroed by the first post-switch visit to the old goal, and how fast is recovery."""
    sw = task.switch_episode
    first_visit = min(res.visits_old_goal) if res.visits_old_goal else None
    zeroed = [(e, t) for e, t, _, ev in res.events if ev == "zeroed" and e >= sw]
    first_zero = min(zeroed) if zeroed else None
    fired = first_visit is not None and first_zero is not None and first_zero <= first_visit
    return {"first_old_goal_visit": first_visit, "first_zeroing": first_zero,
            "fired_by_first_visit": fired,
            "post_switch_steps": res.steps[sw:sw + 20]}


# -- SR oracle ---------------------------------------------------------------

def random_policy_transition(topology: Topology):
    """Onehot-indexed (over free cells) transition matrix of the uniform random policy."""
    cells = topology.free_cells()
    index = {c: i for i, c in enumerate(cells)}
    P = np.zeros((len(cells), len(cells)))
    for c in cells:
        for a in Action:
            P[index[c], index[step_dynamics(c, a, topology)]] += 0.25
    return cells, P


def analytic_sr(topology: Topology, gamma: float) -> tuple[list, np.ndarray]:
    """(I − γ P_π)⁻¹ for the uniform random policy, rows/cols over free cells."""
    cells, P = random_policy_transition(topology)
    return cells, np.linalg.inv(np.eye(len(cells)) - gamma * P)


def learn_random_policy_sr(topology: Topology, gamma: float = 0.9, alpha: float = ALPHA,
                           n_updates: int = 100_000, seed: int = 0) -> np.ndarray:
    """On-policy successor features of the uniform random policy, onehot basis.

    The bootstrap target averages Ψ_a φ_{t+1} over the policy's actions. Returns
    the learned state SR, mean over actions of ψ(s, a), restricted to free cells.
    """
    rng = np.random.default_rng(seed)
    cells = topology.free_cells()
    idx = np.array([c[0] * GRID + c[1] for c in cells])
    psi = np.zeros((N_ACTIONS, GRID * GRID, GRID * GRID))
    pos = cells[int(rng.integers(len(cells)))]
    actions = rng.integers(N_ACTIONS, size=n_updates)
    for k in range(n_updates):
        a = int(actions[k])
        nxt = step_dynamics(pos, Action(a), topology)
        phi_t, phi_n = onehot_feature(pos), onehot_feature(nxt)
        target = phi_t + gamma * np.mean(psi @ phi_n, axis=0)
        psi[a] += alpha * np.outer(target - psi[a] @ phi_t, phi_t)
        pos = nxt
    sr = psi.mean(axis=0)  # sr[:, j] = mean_a ψ(s_j, a)
    return sr[np.ix_(idx, idx)].T


def value_iteration_steps(topology: Topology, start, goal) -> int:
    """Optimal steps from start to goal by value iteration with unit step cost."""
    cells = topology.free_cells()
    V = {c: 0.0 if c == tuple(goal) else math.inf for c in cells}
    for _ in range(len(cells) + 1):
        changed = False
        for c in cells:
            if c == tuple(goal):
                continue
            best = min(1.0 + V[step_dynamics(c, a, topology)] for a in Action)
            if best < V[c]:
                V[c], changed = best, True
        if not changed:
            break
    return int(V[tuple(start)])


# -- outputs -----------------------------------------------------------------

CURVE_HEADER = ("basis", "topology", "seed", "episode", "steps_to_goal", "total_reward")


def write_learning_curves(path, results: list[SessionResult], header_comment: str = "") -> None:
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(CURVE_HEADER)
        for r in results:
            for ep, (s, tot) in enumerate(zip(r.steps, r.rewards)):
                wr.writerow((r.basis, r.topology, r.seed, ep, s, repr(float(tot))))


def rl_table(results: list[SessionResult], optimal: dict, last: int = 20) -> dict:
    """{topology: {"optimal": n, "Mean": {variant: x}, "Median": {variant: x}}} over pooled seeds."""
    table = {}
    for r in results:
        cell = table.setdefault(r.topology, {"optimal": optimal[r.topology], "pooled": {}})
        cell["pooled"].setdefault(r.basis, []).extend(r.steps[-last:])
    for topo, cell in table.items():
        pooled = cell.pop("pooled")
        cell["Mean"] = {v: float(np.mean(x)) for v, x in pooled.items()}
        cell["Median"] = {v: float(np.median(x)) for v, x in pooled.items()}
    return table


def write_rl_table(path, table: dict, variants, header_comment: str = "") -> None:
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(("topology", "optimal", "statistic") + tuple(variants))
        for topo, cell in table.items():
            for stat in ("Mean", "Median"):
                wr.writerow((topo, cell["optimal"], stat) +
                            tuple(repr(cell[stat].get(v, float("nan"))) for v in variants))
