"""Finite MDPs with exact evaluation, a 2D point-mass control task, offline
dataset generation, and the two-state state-collapse counterexample."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    RejectedInputError,
    UndefinedModelError,
    UnsupportedDiscountError,
)

_PROB_TOL = 1e-12


@dataclass
class TabularMDP:
    n_states: int
    n_actions: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    initial_dist: np.ndarray  # (S,)
    discount: float
    r_max: float
    terminal: np.ndarray  # (S,) bool

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        if self.transition.shape != (self.n_states, self.n_actions, self.n_states):
            raise RejectedInputError("transition tensor shape mismatch")
        if self.reward.shape != (self.n_states, self.n_actions):
            raise RejectedInputError("reward shape mismatch")
        row_sums = self.transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > 1e-9:
            raise RejectedInputError("transition rows must sum to 1")
        if np.max(np.abs(self.reward)) > self.r_max + _PROB_TOL:
            raise RejectedInputError("reward exceeds r_max")
        if abs(self.initial_dist.sum() - 1.0) > 1e-9:
            raise RejectedInputError("initial distribution must sum to 1")


@dataclass
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < -_PROB_TOL):
            raise RejectedInputError("negative policy probability")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-9:
            raise RejectedInputError("policy rows must sum to 1")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: np.ndarray, n_actions: int) -> "TabularPolicy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class OfflineDataset:
    state_dim: int
    action_dim: int
    transitions: list[Transition]
    behavior_tag: str = ""

    @property
    def n(self) -> int:
        return len(self.transitions)

    def arrays(self):
        s = np.array([t.state for t in self.transitions], dtype=np.float64)
        a = np.array([t.action for t in self.transitions], dtype=np.float64)
        r = np.array([t.reward for t in self.transitions], dtype=np.float64)
        s2 = np.array([t.next_state for t in self.transitions], dtype=np.float64)
        d = np.array([t.done for t in self.transitions], dtype=bool)
        return s, a, r, s2, d


def atomic_write(path: str, data: str | bytes) -> None:
    """Write via temp file + rename so interrupted runs never truncate."""
    mode = "wb" if isinstance(data, bytes) else "w"
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset: OfflineDataset, path: str) -> None:
    """JSON-lines: header line, then one transition per line. json round-trips
    float64 exactly (repr is shortest-round-trip)."""
    lines = [
        json.dumps(
            {
                "state_dim": dataset.state_dim,
                "action_dim": dataset.action_dim,
                "n": dataset.n,
                "behavior_tag": dataset.behavior_tag,
            }
        )
    ]
    for t in dataset.transitions:
        lines.append(
            json.dumps(
                {
                    "s": list(t.state),
                    "a": list(t.action),
                    "r": float(t.reward),
                    "s2": list(t.next_state),
                    "d": int(t.done),
                }
            )
        )
    atomic_write(path, "\n".join(lines) + "\n")


def load_dataset(path: str) -> OfflineDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        transitions = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            transitions.append(
                Transition(
                    np.array(rec["s"], dtype=np.float64),
                    np.array(rec["a"], dtype=np.float64),
                    float(rec["r"]),
                    np.array(rec["s2"], dtype=np.float64),
                    bool(rec["d"]),
                )
            )
    ds = OfflineDataset(header["state_dim"], header["action_dim"], transitions, header["behavior_tag"])
    if ds.n != header["n"]:
        raise RejectedInputError("dataset header n does not match transition count")
    return ds


def one_hot(index: int, dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[index] = 1.0
    return v


def tabular_indices(dataset: OfflineDataset):
    """Decode one-hot states/actions back to integer indices."""
    s, a, r, s2, d = dataset.arrays()
    return s.argmax(axis=1), a.argmax(axis=1), r, s2.argmax(axis=1), d


def evaluate_policy_exact(mdp: TabularMDP, policy: TabularPolicy) -> tuple[np.ndarray, float]:
    """Solve the Bellman equations directly. gamma = 1 is supported only for
    absorbing episodic MDPs (linear solve on the transient states)."""
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.sum(policy.probs * mdp.reward, axis=1)
    v = np.zeros(mdp.n_states)
    live = ~mdp.terminal
    if np.any(live):
        p_live = p_pi[np.ix_(live, live)]
        a = np.eye(p_live.shape[0]) - mdp.discount * p_live
        if mdp.discount >= 1.0:
            # only valid when every policy trajectory is absorbed
            if np.linalg.matrix_rank(a) < a.shape[0] or np.max(np.abs(np.linalg.eigvals(p_live))) >= 1.0 - 1e-12:
                raise UnsupportedDiscountError("gamma >= 1 with non-terminal cycles")
        v[live] = np.linalg.solve(a, r_pi[live])
    residual = np.max(np.abs(v[live] - (r_pi[live] + mdp.discount * (p_pi[live] @ v)))) if np.any(live) else 0.0
    if residual > 1e-10:
        raise UnsupportedDiscountError(f"Bellman residual {residual:.3e} after direct solve")
    j = float(mdp.initial_dist @ v)
    return v, j


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator,
               discount: float = 0.9, r_max: float = 1.0) -> TabularMDP:
    """Dense random MDP with Dirichlet rows; no terminal states."""
    t = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    return TabularMDP(n_states, n_actions, t, r, rho, discount, r_max,
                      np.zeros(n_states, dtype=bool))


def value_iteration(mdp: TabularMDP, tol: float = 1e-12, max_iters: int = 100_000):
    """Exact-to-tolerance optimal values; returns (V, Q, greedy policy)."""
    v = np.zeros(mdp.n_states)
    live = ~mdp.terminal
    for _ in range(max_iters):
        q = mdp.reward + mdp.discount * (mdp.transition @ v)
        v_new = np.where(live, q.max(axis=1), 0.0)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    q = mdp.reward + mdp.discount * (mdp.transition @ v)
    return v, q, TabularPolicy.deterministic(q.argmax(axis=1), mdp.n_actions)


def make_gridworld(size: int = 5, slip: float = 0.1, discount: float = 0.95,
                   r_max: float = 1.0) -> TabularMDP:
    """size x size grid, 4 moves, slip probability to a uniform random move,
    start at one corner, absorbing goal at the opposite corner paying r_max."""
    n_states = size * size
    n_actions = 4
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    goal = n_states - 1

    def clamp(r, c):
        return min(max(r, 0), size - 1) * size + min(max(c, 0), size - 1)

    t = np.zeros((n_states, n_actions, n_states))
    rew = np.zeros((n_states, n_actions))
    for s in range(n_states):
        r, c = divmod(s, size)
        for a in range(n_actions):
            if s == goal:
                t[s, a, s] = 1.0
                continue
            for a2, (dr, dc) in enumerate(moves):
                p = (1.0 - slip) if a2 == a else slip / (n_actions - 1)
                s2 = clamp(r + dr, c + dc)
                t[s, a, s2] += p
                if s2 == goal:
                    rew[s, a] += p * r_max
    rho = np.zeros(n_states)
    rho[0] = 1.0
    terminal = np.zeros(n_states, dtype=bool)
    terminal[goal] = True
    return TabularMDP(n_states, n_actions, t, rew, rho, discount, r_max, terminal)


def epsilon_greedy_policy(greedy: TabularPolicy, epsilon: float) -> TabularPolicy:
    n_actions = greedy.probs.shape[1]
    probs = (1.0 - epsilon) * greedy.probs + epsilon / n_actions
    return TabularPolicy(probs)


def build_counterexample() -> tuple[TabularMDP, OfflineDataset, np.ndarray]:
    """Two-state episodic MDP (gamma = 1), its six-transition dataset of four
    trajectories, and the state-collapse map that merges both live states."""
    n_states, n_actions = 3, 2  # s0, s1, terminal
    t = np.zeros((n_states, n_actions, n_states))
    t[0, 0, 2] = 1.0
    t[0, 1, 1] = 1.0
    t[1, 0, 2] = 1.0
    t[1, 1, 2] = 1.0
    t[2, :, 2] = 1.0
    r = np.zeros((n_states, n_actions))
    r[1, 0] = 1.0
    rho = np.array([1.0, 0.0, 0.0])
    terminal = np.array([False, False, True])
    mdp = TabularMDP(n_states, n_actions, t, r, rho, 1.0, 1.0, terminal)

    def tr(s, a, rew, s2, done):
        return Transition(one_hot(s, n_states), one_hot(a, n_actions), rew, one_hot(s2, n_states), done)

    transitions = [
        tr(0, 0, 0.0, 2, True),
        tr(0, 0, 0.0, 2, True),
        tr(0, 1, 0.0, 1, False),
        tr(1, 0, 1.0, 2, True),
        tr(0, 1, 0.0, 1, False),
        tr(1, 1, 0.0, 2, True),
    ]
    dataset = OfflineDataset(n_states, n_actions, transitions, "counterexample-four-trajectories")
    collapse = np.array([0, 0, 1])  # both live states map to z; terminal kept apart
    return mdp, dataset, collapse


def empirical_mdp_from_dataset(dataset: OfflineDataset, n_states: int, n_actions: int,
                               discount: float) -> tuple[TabularMDP, np.ndarray]:
    """Maximum-likelihood tabular model. Returns (mdp, counts). Unvisited pairs
    self-loop with zero reward. A synthetic absorbing state indexes done
    transitions; initial distribution is empirical over episode starts."""
    s, a, r, s2, d = tabular_indices(dataset)
    n_total = n_states + 1  # + absorbing terminal
    counts = np.zeros((n_states, n_actions))
    next_counts = np.zeros((n_states, n_actions, n_total))
    reward_sums = np.zeros((n_states, n_actions))
    start_counts = np.zeros(n_total)
    is_start = True
    for si, ai, ri, s2i, di in zip(s, a, r, s2, d):
        if is_start:
            start_counts[si] += 1
        counts[si, ai] += 1
        reward_sums[si, ai] += ri
        next_counts[si, ai, n_states if di else s2i] += 1
        is_start = bool(di)
    t = np.zeros((n_total, n_actions, n_total))
    rew = np.zeros((n_total, n_actions))
    for si in range(n_states):
        for ai in range(n_actions):
            if counts[si, ai] > 0:
                t[si, ai] = next_counts[si, ai] / counts[si, ai]
                rew[si, ai] = reward_sums[si, ai] / counts[si, ai]
            else:
                t[si, ai, si] = 1.0
    t[n_states, :, n_states] = 1.0
    rho = start_counts / start_counts.sum() if start_counts.sum() > 0 else np.eye(n_total)[0]
    terminal = np.zeros(n_total, dtype=bool)
    terminal[n_states] = True
    # states never visited as a current state have no model; absorb them at 0
    terminal[:n_states] |= counts.sum(axis=1) == 0
    r_max = max(1.0, np.max(np.abs(rew)))
    mdp = TabularMDP(n_total, n_actions, t, rew, rho, discount, r_max, terminal)
    return mdp, counts


def collapse_dataset(dataset: OfflineDataset, collapse: np.ndarray) -> OfflineDataset:
    """Re-encode a tabular dataset through a state-collapse map."""
    s, a, r, s2, d = tabular_indices(dataset)
    n_collapsed = int(collapse.max()) + 1
    n_actions = dataset.action_dim
    transitions = []
    for si, ai, ri, s2i, di in zip(s, a, r, s2, d):
        transitions.append(
            Transition(
                one_hot(collapse[si], n_collapsed),
                one_hot(ai, n_actions),
                ri,
                one_hot(collapse[s2i], n_collapsed),
                bool(di),
            )
        )
    return OfflineDataset(n_collapsed, n_actions, transitions, dataset.behavior_tag + "+collapsed")


def evaluate_on_empirical_collapsed_model(dataset: OfflineDataset, collapse: np.ndarray,
                                          policy_probs: np.ndarray, discount: float = 1.0) -> float:
    """Build the ML empirical MDP over collapsed states and evaluate the given
    policy (rows indexed by collapsed state) exactly."""
    collapsed = collapse_dataset(dataset, collapse)
    n_collapsed = collapsed.state_dim
    mdp, counts = empirical_mdp_from_dataset(collapsed, n_collapsed, collapsed.action_dim, discount)
    probs = np.asarray(policy_probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = np.tile(probs, (n_collapsed, 1))
    for s in range(n_collapsed):
        if counts[s].sum() == 0:
            continue  # unreachable in the empirical model
        unseen = counts[s] == 0
        if np.any(probs[s, unseen] > 0):
            raise UndefinedModelError(f"policy puts mass on unseen action at collapsed state {s}")
    full = np.vstack([probs, np.full((1, collapsed.action_dim), 1.0 / collapsed.action_dim)])
    _, j = evaluate_policy_exact(mdp, TabularPolicy(full))
    return j


def estimate_behavior_tabular(dataset: OfflineDataset, n_states: int, n_actions: int):
    """ML count-ratio estimate of the behavior policy. Unvisited states fall
    back to uniform and are flagged."""
    s, a, _, _, _ = tabular_indices(dataset)
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (s, a), 1.0)
    totals = counts.sum(axis=1)
    unvisited = totals == 0
    probs = np.full((n_states, n_actions), 1.0 / n_actions)
    seen = ~unvisited
    probs[seen] = counts[seen] / totals[seen, None]
    return TabularPolicy(probs), counts, unvisited


def generate_tabular_dataset(mdp: TabularMDP, policy: TabularPolicy, n: int, seed: int,
                             max_episode_len: int = 200, behavior_tag: str = "tabular") -> OfflineDataset:
    rng = np.random.default_rng(seed)
    transitions: list[Transition] = []
    while len(transitions) < n:
        s = rng.choice(mdp.n_states, p=mdp.initial_dist)
        for _ in range(max_episode_len):
            a = rng.choice(mdp.n_actions, p=policy.probs[s])
            s2 = rng.choice(mdp.n_states, p=mdp.transition[s, a])
            done = bool(mdp.terminal[s2])
            transitions.append(
                Transition(one_hot(s, mdp.n_states), one_hot(a, mdp.n_actions),
                           float(mdp.reward[s, a]), one_hot(s2, mdp.n_states), done)
            )
            if done or len(transitions) >= n:
                break
            s = s2
    return OfflineDataset(mdp.n_states, mdp.n_actions, transitions[:n], behavior_tag)


@dataclass
class PointMassEnv:
    """Damped point mass on the plane. State = (position, velocity), actions
    clipped to [-1, 1]^2, reward = -||position - goal|| after the move."""
    goal: np.ndarray = field(default_factory=lambda: np.zeros(2))
    max_steps: int = 100

    state_dim: int = 4
    action_dim: int = 2

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        p = rng.uniform(-1.0, 1.0, size=2)
        return np.concatenate([p, np.zeros(2)])

    def step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        p, v = state[:2], state[2:]
        v = 0.9 * v + 0.1 * a
        p = p + 0.05 * v
        reward = -float(np.linalg.norm(p - self.goal))
        return np.concatenate([p, v]), reward


def pointmass_behavior(name: str, env: PointMassEnv):
    """Named behavior policies: (state, rng) -> action."""

    def controller(gain: float, noise: float):
        def act(state, rng):
            a = gain * (env.goal - state[:2]) - 0.2 * state[2:]
            if noise > 0:
                a = a + rng.normal(0.0, noise, size=2)
            return np.clip(a, -1.0, 1.0)

        return act

    if name == "expert":
        return controller(1.0, 0.05)
    if name == "medium":
        return controller(0.3, 0.3)
    if name == "random":
        return lambda state, rng: rng.uniform(-1.0, 1.0, size=2)
    raise RejectedInputError(f"unknown point-mass behavior {name!r}")


def generate_pointmass_dataset(env: PointMassEnv, behavior, n: int, seed: int,
                               behavior_tag: str = "pointmass") -> OfflineDataset:
    """behavior is (state, rng) -> action, or a list of (weight, fn) pairs
    sampled per episode."""
    rng = np.random.default_rng(seed)
    mixture = isinstance(behavior, list)
    transitions: list[Transition] = []
    while len(transitions) < n:
        if mixture:
            weights = np.array([w for w, _ in behavior])
            idx = rng.choice(len(behavior), p=weights / weights.sum())
            act = behavior[idx][1]
        else:
            act = behavior
        s = env.reset(rng)
        for step in range(env.max_steps):
            a = act(s, rng)
            s2, r = env.step(s, a)
            done = step == env.max_steps - 1
            transitions.append(Transition(s, np.asarray(a, dtype=np.float64), r, s2, done))
            if len(transitions) >= n:
                break
            s = s2
    return OfflineDataset(env.state_dim, env.action_dim, transitions[:n], behavior_tag)


def generate_dataset(env_or_mdp, behavior, n: int, seed: int, behavior_tag: str = "") -> OfflineDataset:
    if n <= 0:
        raise RejectedInputError("n must be positive")
    if isinstance(env_or_mdp, TabularMDP):
        return generate_tabular_dataset(env_or_mdp, behavior, n, seed,
                                        behavior_tag=behavior_tag or "tabular")
    if isinstance(env_or_mdp, PointMassEnv):
        return generate_pointmass_dataset(env_or_mdp, behavior, n, seed,
                                          behavior_tag=behavior_tag or "pointmass")
    raise RejectedInputError(f"unsupported environment type {type(env_or_mdp)!r}")
