"""Downstream offline agents trained on raw states or frozen representations:
behavior cloning, TD3+BC, CQL (continuous and tabular), and tabular SPIBB."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .bpr import EncoderModel, PredictorModel, bpr_loss, build_encoder
from .envs import (
    OfflineDataset,
    PointMassEnv,
    TabularMDP,
    TabularPolicy,
    empirical_mdp_from_dataset,
    estimate_behavior_tabular,
    evaluate_policy_exact,
    tabular_indices,
)
from .errors import (
    ContractViolationError,
    RejectedInputError,
    TrainingDivergenceError,
)

TRACE_COLUMNS = ("step", "critic_loss", "actor_loss", "bpr_loss",
                 "eval_return_mean", "eval_return_std", "effective_dimension")


@dataclass
class AgentConfig:
    algorithm: str = "td3bc"
    use_encoder: bool = False
    co_train_encoder: bool = False
    gradient_steps: int = 5000
    batch_size: int = 256
    seed: int = 0
    gamma: float = 0.99
    learning_rate: float = 3e-4
    hidden: tuple[int, ...] = (64, 64)
    repr_dim: int = 64  # only used when co-training builds a fresh encoder
    td3bc_alpha: float = 2.5
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    cql_alpha: float = 1.0
    cql_n_samples: int = 10
    cql_target_every: int = 100
    cql_temp: float = 0.2  # tabular softmax temperature; small keeps J_perp a tight lower bound
    n_wedge: float = 10.0
    eval_every: int = 0
    eval_episodes: int = 10
    co_train_bpr_weight: float = 0.0
    co_train_encoder_lr: float | None = None  # defaults to learning_rate
    q_hidden_activation: str = "relu"  # tanh bounds the feature scale for spectral probes

    def __post_init__(self):
        if self.algorithm not in ("bc", "td3bc", "cql", "spibb"):
            raise RejectedInputError(f"unknown algorithm {self.algorithm!r}")
        if self.co_train_encoder and not self.use_encoder:
            raise RejectedInputError("co_train_encoder requires use_encoder")


class PolicyModel:
    """Deterministic tanh policy scaled to the action bound."""

    def __init__(self, net: numerics.MlpModel, action_bound: float = 1.0):
        if net.layers[-1].activation != "tanh":
            raise RejectedInputError("policy net must end with tanh")
        self.net = net
        self.action_bound = action_bound

    @classmethod
    def build(cls, input_dim: int, action_dim: int, hidden: tuple[int, ...],
              rng: np.random.Generator, action_bound: float = 1.0) -> "PolicyModel":
        dims = [input_dim, *hidden, action_dim]
        acts = ["relu"] * len(hidden) + ["tanh"]
        return cls(numerics.init_mlp(dims, acts, rng), action_bound)

    def act(self, x: np.ndarray) -> np.ndarray:
        y, _ = numerics.forward(self.net, x)
        return self.action_bound * y


class QModel:
    """State-action value net; the last hidden layer is the feature layer."""

    def __init__(self, net: numerics.MlpModel):
        if len(net.layers) < 2 or net.layers[-1].weight.shape[0] != 1:
            raise RejectedInputError("Q net needs >= 2 layers and scalar output")
        self.net = net

    @classmethod
    def build(cls, input_dim: int, action_dim: int, hidden: tuple[int, ...],
              rng: np.random.Generator, hidden_activation: str = "relu") -> "QModel":
        dims = [input_dim + action_dim, *hidden, 1]
        acts = [hidden_activation] * len(hidden) + ["identity"]
        return cls(numerics.init_mlp(dims, acts, rng))

    @property
    def feature_dim(self) -> int:
        return self.net.layers[-1].weight.shape[1]

    def value(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        q, _ = numerics.forward(self.net, np.concatenate([x, a], axis=1))
        return q[:, 0]


def extract_features(q: QModel, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations, one row per (x, a) pair."""
    if x.shape[0] == 0:
        raise RejectedInputError("empty feature batch")
    _, cache = numerics.forward(q.net, np.concatenate([x, a], axis=1))
    return cache.inputs[-1].copy()


# ---------------------------------------------------------------- losses


def bc_loss_and_grads(policy: PolicyModel, x: np.ndarray, a: np.ndarray):
    y, cache = numerics.forward(policy.net, x)
    y = policy.action_bound * y
    diff = y - a
    n = x.shape[0]
    loss = float(np.sum(diff * diff, axis=1).mean())
    gy = 2.0 * diff / n * policy.action_bound
    grads, _ = numerics.backward(policy.net, cache, gy)
    return loss, grads


def cql_actor_loss_and_grads(policy: PolicyModel, q: QModel, x: np.ndarray):
    """-mean Q(x, pi(x)); critic held fixed."""
    y, pcache = numerics.forward(policy.net, x)
    y = policy.action_bound * y
    n = x.shape[0]
    qv, qcache = numerics.forward(q.net, np.concatenate([x, y], axis=1))
    loss = float(-qv[:, 0].mean())
    _, gqin = numerics.backward(q.net, qcache, np.full((n, 1), -1.0 / n))
    gy = gqin[:, x.shape[1]:]
    grads, _ = numerics.backward(policy.net, pcache, gy * policy.action_bound)
    return loss, grads


def td3bc_actor_loss_and_grads(policy: PolicyModel, q: QModel, x: np.ndarray,
                               a: np.ndarray, lam: float):
    """-lam * mean Q(x, pi(x)) + mean ||pi(x) - a||^2; lam is a constant."""
    y, pcache = numerics.forward(policy.net, x)
    y = policy.action_bound * y
    n = x.shape[0]
    qin = np.concatenate([x, y], axis=1)
    qv, qcache = numerics.forward(q.net, qin)
    diff = y - a
    loss = float(-lam * qv[:, 0].mean() + np.sum(diff * diff, axis=1).mean())
    _, gqin = numerics.backward(q.net, qcache, np.full((n, 1), -lam / n))
    gy = gqin[:, x.shape[1]:] + 2.0 * diff / n
    grads, _ = numerics.backward(policy.net, pcache, gy * policy.action_bound)
    return loss, grads


def critic_td_loss_and_grads(q: QModel, x: np.ndarray, a: np.ndarray,
                             target: np.ndarray):
    qv, cache = numerics.forward(q.net, np.concatenate([x, a], axis=1))
    td = qv[:, 0] - target
    n = x.shape[0]
    loss = float(np.mean(td * td))
    grads, _ = numerics.backward(q.net, cache, (2.0 * td / n)[:, None])
    return loss, grads


def cql_critic_loss_and_grads(q: QModel, x: np.ndarray, a_data: np.ndarray,
                              target: np.ndarray, candidates: np.ndarray,
                              alpha: float):
    """TD loss plus alpha * mean(logsumexp_j Q(x, c_j) - Q(x, a_data)).
    candidates has shape (n, m, action_dim)."""
    n, m, adim = candidates.shape
    qd, dcache = numerics.forward(q.net, np.concatenate([x, a_data], axis=1))
    td = qd[:, 0] - target
    loss = float(np.mean(td * td))
    g_qd = 2.0 * td / n

    xc = np.repeat(x, m, axis=0)
    ac = candidates.reshape(n * m, adim)
    qc, ccache = numerics.forward(q.net, np.concatenate([xc, ac], axis=1))
    qc = qc.reshape(n, m)
    mx = qc.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.sum(np.exp(qc - mx), axis=1))
    soft = np.exp(qc - lse[:, None])
    loss += float(alpha * np.mean(lse - qd[:, 0]))
    g_qd = g_qd - alpha / n
    g_qc = alpha * soft / n

    grads_d, _ = numerics.backward(q.net, dcache, g_qd[:, None])
    grads_c, _ = numerics.backward(q.net, ccache, g_qc.reshape(n * m, 1))
    grads = [gd + gc for gd, gc in zip(grads_d, grads_c)]
    return loss, grads


# ---------------------------------------------------------------- helpers


def _soft_update(target: numerics.MlpModel, source: numerics.MlpModel, tau: float):
    target.set_parameters([
        (1.0 - tau) * tp + tau * sp
        for tp, sp in zip(target.parameters(), source.parameters())
    ])


def _check_finite(loss: float, step: int, what: str):
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite {what} loss at step {step}")


@dataclass
class TrainResult:
    policy: PolicyModel | None
    critics: tuple[QModel, ...]
    encoder: EncoderModel | None
    trace: list[dict] = field(default_factory=list)
    psi_trace: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def q(self) -> QModel:
        return self.critics[0]


def _encode_inputs(encoder, states, use_encoder):
    if not use_encoder:
        return states
    return encoder.encode(states)


def _rollout_policy(policy: PolicyModel, encoder: EncoderModel | None, use_encoder: bool):
    def act(state):
        x = encoder.encode(state) if use_encoder else state
        return policy.act(x)
    return act


def evaluate_return(policy_fn, env: PointMassEnv, episodes: int, seed: int):
    """Mean/std/per-episode return of a deterministic policy callable."""
    if episodes < 1:
        raise RejectedInputError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    returns = np.zeros(episodes)
    for ep in range(episodes):
        s = env.reset(rng)
        total = 0.0
        for _ in range(env.max_steps):
            s, r = env.step(s, policy_fn(s))
            total += r
        returns[ep] = total
    return float(returns.mean()), float(returns.std()), returns


def evaluate_return_tabular(mdp: TabularMDP, policy: TabularPolicy, episodes: int,
                            seed: int, horizon: int = 400):
    rng = np.random.default_rng(seed)
    returns = np.zeros(episodes)
    for ep in range(episodes):
        s = rng.choice(mdp.n_states, p=mdp.initial_dist)
        total, disc = 0.0, 1.0
        for _ in range(horizon):
            if mdp.terminal[s]:
                break
            a = rng.choice(mdp.n_actions, p=policy.probs[s])
            total += disc * mdp.reward[s, a]
            disc *= mdp.discount
            s = rng.choice(mdp.n_states, p=mdp.transition[s, a])
        returns[ep] = total
    return float(returns.mean()), float(returns.std()), returns


def _maybe_probe(result: TrainResult, step: int, q: QModel, probe_batch,
                 encoder, use_encoder):
    if probe_batch is None:
        return
    ps, pa = probe_batch
    x = _encode_inputs(encoder, ps, use_encoder)
    result.psi_trace.append((step, extract_features(q, x, pa)))


# ---------------------------------------------------------------- trainers


def train_bc(dataset: OfflineDataset, config: AgentConfig,
             encoder: EncoderModel | None = None) -> TrainResult:
    states, actions, _, _, _ = dataset.arrays()
    if states.shape[0] == 0:
        raise RejectedInputError("empty dataset")
    x_all = _encode_inputs(encoder, states, config.use_encoder)
    rng = np.random.default_rng(config.seed)
    policy = PolicyModel.build(x_all.shape[1], dataset.action_dim, config.hidden, rng)
    adam = numerics.AdamState.for_params(policy.net.parameters(), config.learning_rate)
    result = TrainResult(policy, (), encoder)
    for step in range(config.gradient_steps):
        idx = rng.integers(0, x_all.shape[0], size=config.batch_size)
        loss, grads = bc_loss_and_grads(policy, x_all[idx], actions[idx])
        _check_finite(loss, step, "bc")
        policy.net.set_parameters(numerics.adam_step(adam, policy.net.parameters(), grads))
        if config.eval_every and step % config.eval_every == 0:
            result.trace.append({"step": step, "actor_loss": loss})
    return result


def train_td3bc(dataset: OfflineDataset, config: AgentConfig,
                encoder: EncoderModel | None = None,
                env: PointMassEnv | None = None,
                probe_batch=None, probe_every: int = 0) -> TrainResult:
    states, actions, rewards, next_states, dones = dataset.arrays()
    rng = np.random.default_rng(config.seed)
    co_train = config.co_train_encoder
    if config.use_encoder and encoder is None and not co_train:
        raise RejectedInputError("use_encoder requires an encoder")
    if co_train:
        if encoder is None:
            encoder = build_encoder(dataset.state_dim, config.repr_dim, config.hidden, rng)
        if encoder.frozen:
            raise ContractViolationError("co-training requires an unfrozen encoder")
    frozen_hash = encoder.param_hash() if (encoder is not None and encoder.frozen) else None

    if config.use_encoder and not co_train:
        x_all = encoder.encode(states)
        x2_all = encoder.encode(next_states)
    else:
        x_all, x2_all = states, next_states
    input_dim = encoder.repr_dim if config.use_encoder else dataset.state_dim
    adim = dataset.action_dim

    policy = PolicyModel.build(input_dim, adim, config.hidden, rng)
    q1 = QModel.build(input_dim, adim, config.hidden, rng, config.q_hidden_activation)
    q2 = QModel.build(input_dim, adim, config.hidden, rng, config.q_hidden_activation)
    policy_t = PolicyModel(policy.net.copy())
    q1_t = QModel(q1.net.copy())
    q2_t = QModel(q2.net.copy())

    adam_pi = numerics.AdamState.for_params(policy.net.parameters(), config.learning_rate)
    adam_q = numerics.AdamState.for_params(
        q1.net.parameters() + q2.net.parameters(), config.learning_rate)
    enc_lr = config.co_train_encoder_lr if config.co_train_encoder_lr is not None \
        else config.learning_rate
    adam_enc = (numerics.AdamState.for_params(encoder.net.parameters(), enc_lr)
                if co_train else None)

    predictor = None
    adam_pred = None
    if co_train and config.co_train_bpr_weight > 0.0:
        predictor = PredictorModel.build(encoder.repr_dim, adim, config.hidden, rng)
        adam_pred = numerics.AdamState.for_params(predictor.net.parameters(),
                                                  config.learning_rate)

    result = TrainResult(policy, (q1, q2), encoder)
    _maybe_probe(result, 0, q1, probe_batch, encoder, config.use_encoder)

    last_actor_loss = float("nan")
    for step in range(config.gradient_steps):
        idx = rng.integers(0, states.shape[0], size=config.batch_size)
        if co_train:
            xb, enc_cache = numerics.forward(encoder.net, states[idx])
            x2b = encoder.encode(next_states[idx])
        else:
            xb, x2b = x_all[idx], x2_all[idx]
        ab, rb, db = actions[idx], rewards[idx], dones[idx]

        noise = np.clip(rng.normal(0.0, config.target_noise, size=(len(idx), adim)),
                        -config.noise_clip, config.noise_clip)
        a2 = np.clip(policy_t.act(x2b) + noise, -policy.action_bound, policy.action_bound)
        tq = np.minimum(q1_t.value(x2b, a2), q2_t.value(x2b, a2))
        target = rb + config.gamma * (1.0 - db.astype(np.float64)) * tq

        # critic update; in co-train mode the critic gradient also reaches the encoder
        qin = np.concatenate([xb, ab], axis=1)
        closs = 0.0
        g_x = np.zeros_like(xb)
        q_grads = []
        for qm in (q1, q2):
            qv, cache = numerics.forward(qm.net, qin)
            td = qv[:, 0] - target
            closs += float(np.mean(td * td))
            grads, gin = numerics.backward(qm.net, cache, (2.0 * td / len(idx))[:, None])
            q_grads.extend(grads)
            g_x += gin[:, : xb.shape[1]]
        _check_finite(closs, step, "critic")
        new_q = numerics.adam_step(adam_q, q1.net.parameters() + q2.net.parameters(), q_grads)
        nq1 = len(q1.net.parameters())
        q1.net.set_parameters(new_q[:nq1])
        q2.net.set_parameters(new_q[nq1:])

        if co_train:
            g_rep = g_x
            ok = np.linalg.norm(ab, axis=1) >= 1e-6
            if predictor is not None and np.any(ok):
                yb, pcache = numerics.forward(predictor.net, xb)
                gy_ok = np.zeros_like(yb)
                _, gy_sub = bpr_loss(yb[ok], ab[ok])
                gy_ok[ok] = gy_sub
                pgrads_pred, gz = numerics.backward(predictor.net, pcache, gy_ok)
                g_rep = g_x + config.co_train_bpr_weight * gz
                predictor.net.set_parameters(numerics.adam_step(
                    adam_pred, predictor.net.parameters(),
                    [config.co_train_bpr_weight * g for g in pgrads_pred]))
            enc_grads, _ = numerics.backward(encoder.net, enc_cache, g_rep)
            encoder.net.set_parameters(
                numerics.adam_step(adam_enc, encoder.net.parameters(), enc_grads))

        if step % config.policy_delay == 0:
            qv_now = q1.value(xb, policy.act(xb))
            lam = config.td3bc_alpha / max(np.mean(np.abs(qv_now)), 1e-8)
            aloss, pgrads = td3bc_actor_loss_and_grads(policy, q1, xb, ab, lam)
            _check_finite(aloss, step, "actor")
            policy.net.set_parameters(
                numerics.adam_step(adam_pi, policy.net.parameters(), pgrads))
            last_actor_loss = aloss
            _soft_update(policy_t.net, policy.net, config.tau)
            _soft_update(q1_t.net, q1.net, config.tau)
            _soft_update(q2_t.net, q2.net, config.tau)

        done_step = step + 1
        if probe_every and done_step % probe_every == 0:
            _maybe_probe(result, done_step, q1, probe_batch, encoder, config.use_encoder)
        if config.eval_every and done_step % config.eval_every == 0 and env is not None:
            mean, std, _ = evaluate_return(
                _rollout_policy(policy, encoder, config.use_encoder),
                env, config.eval_episodes, seed=config.seed * 100003 + done_step)
            result.trace.append({
                "step": done_step, "critic_loss": closs, "actor_loss": last_actor_loss,
                "eval_return_mean": mean, "eval_return_std": std,
            })

    if frozen_hash is not None and encoder.param_hash() != frozen_hash:
        raise ContractViolationError("frozen encoder parameters changed during training")
    return result


def episode_start_states(dataset: OfflineDataset) -> np.ndarray:
    _, _, _, _, d = dataset.arrays()
    starts = np.zeros(dataset.n, dtype=bool)
    starts[0] = True
    starts[1:] = d[:-1]
    s = dataset.arrays()[0]
    return s[starts]


def train_cql_continuous(dataset: OfflineDataset, config: AgentConfig,
                         encoder: EncoderModel | None = None,
                         env: PointMassEnv | None = None,
                         probe_batch=None, probe_every: int = 0) -> TrainResult:
    states, actions, rewards, next_states, dones = dataset.arrays()
    rng = np.random.default_rng(config.seed)
    if config.use_encoder:
        if encoder is None:
            raise RejectedInputError("use_encoder requires an encoder")
        x_all, x2_all = encoder.encode(states), encoder.encode(next_states)
        input_dim = encoder.repr_dim
    else:
        x_all, x2_all = states, next_states
        input_dim = dataset.state_dim
    frozen_hash = encoder.param_hash() if (encoder is not None and encoder.frozen) else None
    adim = dataset.action_dim

    policy = PolicyModel.build(input_dim, adim, config.hidden, rng)
    q = QModel.build(input_dim, adim, config.hidden, rng, config.q_hidden_activation)
    q_t = QModel(q.net.copy())
    adam_pi = numerics.AdamState.for_params(policy.net.parameters(), config.learning_rate)
    adam_q = numerics.AdamState.for_params(q.net.parameters(), config.learning_rate)

    result = TrainResult(policy, (q,), encoder)
    _maybe_probe(result, 0, q, probe_batch, encoder, config.use_encoder)
    for step in range(config.gradient_steps):
        idx = rng.integers(0, states.shape[0], size=config.batch_size)
        xb, x2b, ab, rb, db = x_all[idx], x2_all[idx], actions[idx], rewards[idx], dones[idx]
        target = rb + config.gamma * (1.0 - db.astype(np.float64)) * q_t.value(x2b, policy.act(x2b))
        cand = rng.uniform(-1.0, 1.0, size=(len(idx), config.cql_n_samples, adim))
        cand = np.concatenate([cand, policy.act(xb)[:, None, :]], axis=1)
        closs, cgrads = cql_critic_loss_and_grads(q, xb, ab, target, cand, config.cql_alpha)
        _check_finite(closs, step, "cql critic")
        q.net.set_parameters(numerics.adam_step(adam_q, q.net.parameters(), cgrads))

        aloss, pgrads = cql_actor_loss_and_grads(policy, q, xb)
        _check_finite(aloss, step, "cql actor")
        policy.net.set_parameters(numerics.adam_step(adam_pi, policy.net.parameters(), pgrads))
        _soft_update(q_t.net, q.net, config.tau)

        done_step = step + 1
        if probe_every and done_step % probe_every == 0:
            _maybe_probe(result, done_step, q, probe_batch, encoder, config.use_encoder)
        if config.eval_every and done_step % config.eval_every == 0 and env is not None:
            mean, std, _ = evaluate_return(
                _rollout_policy(policy, encoder, config.use_encoder),
                env, config.eval_episodes, seed=config.seed * 100003 + done_step)
            result.trace.append({"step": done_step, "critic_loss": closs,
                                 "actor_loss": aloss,
                                 "eval_return_mean": mean, "eval_return_std": std})

    if frozen_hash is not None and encoder.param_hash() != frozen_hash:
        raise ContractViolationError("frozen encoder parameters changed during training")
    return result


@dataclass
class TabularCQLResult:
    q: np.ndarray  # (S, A) conservative action values
    policy: TabularPolicy  # greedy
    trace: list[dict]

    def j_perp(self, policy_probs: np.ndarray, initial_dist: np.ndarray) -> float:
        """E_{s0}[Q(s0, pi(s0))] under the conservative critic."""
        per_state = np.sum(policy_probs * self.q, axis=1)
        return float(initial_dist @ per_state)


def train_cql_tabular(dataset: OfflineDataset, n_states: int, n_actions: int,
                      config: AgentConfig) -> TabularCQLResult:
    """Gradient-trained conservative Q table: TD loss toward a periodically
    copied target table plus the logsumexp-minus-data penalty, exact over A.
    With the penalty on, the bootstrap uses the same softmax-weighted value,
    so the learned values stay pessimistic at the greedy action instead of
    re-inflating through a hard max over penalized entries."""
    s, a, r, s2, d = tabular_indices(dataset)
    if len(s) == 0:
        raise RejectedInputError("empty dataset")
    rng = np.random.default_rng(config.seed)
    temp = config.cql_temp
    if temp <= 0.0:
        raise RejectedInputError("cql_temp must be positive")
    q = np.zeros((n_states, n_actions))
    q_t = q.copy()
    adam = numerics.AdamState.for_params([q], config.learning_rate)
    trace = []
    for step in range(config.gradient_steps):
        idx = rng.integers(0, len(s), size=min(config.batch_size, len(s)))
        si, ai, ri, s2i, di = s[idx], a[idx], r[idx], s2[idx], d[idx]
        if config.cql_alpha > 0.0:
            rows_t = q_t[s2i] / temp
            w = np.exp(rows_t - rows_t.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            next_v = np.sum(w * q_t[s2i], axis=1)
        else:
            next_v = q_t[s2i].max(axis=1)
        target = ri + config.gamma * (1.0 - di.astype(np.float64)) * next_v
        td = q[si, ai] - target
        loss = float(np.mean(td * td))
        grad = np.zeros_like(q)
        np.add.at(grad, (si, ai), 2.0 * td / len(idx))
        if config.cql_alpha > 0.0:
            rows = q[si] / temp
            mx = rows.max(axis=1, keepdims=True)
            lse = temp * (mx[:, 0] + np.log(np.sum(np.exp(rows - mx), axis=1)))
            soft = np.exp(rows - lse[:, None] / temp)
            loss += float(config.cql_alpha * np.mean(lse - q[si, ai]))
            np.add.at(grad, (si,), config.cql_alpha * soft / len(idx))
            np.add.at(grad, (si, ai), -config.cql_alpha / len(idx))
        _check_finite(loss, step, "tabular cql")
        q = numerics.adam_step(adam, [q], [grad])[0]
        if (step + 1) % config.cql_target_every == 0:
            q_t = q.copy()
        if config.eval_every and (step + 1) % config.eval_every == 0:
            trace.append({"step": step + 1, "critic_loss": loss})
    greedy = TabularPolicy.deterministic(q.argmax(axis=1), n_actions)
    return TabularCQLResult(q, greedy, trace)


def train_cql(dataset: OfflineDataset, config: AgentConfig,
              encoder: EncoderModel | None = None, env: PointMassEnv | None = None,
              tabular_shape: tuple[int, int] | None = None, **kw):
    if tabular_shape is not None:
        return train_cql_tabular(dataset, tabular_shape[0], tabular_shape[1], config)
    return train_cql_continuous(dataset, config, encoder, env, **kw)


@dataclass
class SpibbResult:
    policy: TabularPolicy
    behavior_estimate: TabularPolicy
    counts: np.ndarray
    j_hat_out: float
    j_hat_behavior: float
    empirical_mdp: TabularMDP


def _q_on_empirical(mdp_hat: TabularMDP, policy_full: TabularPolicy) -> np.ndarray:
    v, _ = evaluate_policy_exact(mdp_hat, policy_full)
    return mdp_hat.reward + mdp_hat.discount * (mdp_hat.transition @ v)


def _full_policy(probs: np.ndarray, mdp_hat: TabularMDP) -> TabularPolicy:
    extra = mdp_hat.n_states - probs.shape[0]
    pad = np.full((extra, probs.shape[1]), 1.0 / probs.shape[1])
    return TabularPolicy(np.vstack([probs, pad]))


def train_spibb_tabular(dataset: OfflineDataset, n_states: int, n_actions: int,
                        config: AgentConfig, max_iters: int = 200) -> SpibbResult:
    """Policy iteration on the empirical MDP, constrained to copy the estimated
    behavior at state-action pairs with fewer than n_wedge visits."""
    behavior, counts, _ = estimate_behavior_tabular(dataset, n_states, n_actions)
    mdp_hat, _ = empirical_mdp_from_dataset(dataset, n_states, n_actions, config.gamma)
    probs = behavior.probs.copy()
    for _ in range(max_iters):
        q = _q_on_empirical(mdp_hat, _full_policy(probs, mdp_hat))[:n_states]
        new = behavior.probs.copy()
        for st in range(n_states):
            free = counts[st] >= config.n_wedge
            if not np.any(free):
                continue
            new[st, free] = 0.0
            free_idx = np.flatnonzero(free)
            best = free_idx[np.argmax(q[st, free_idx])]
            new[st, best] = behavior.probs[st, free].sum()
        if np.allclose(new, probs, atol=1e-12):
            break
        probs = new
    out = TabularPolicy(probs)
    _, j_out = evaluate_policy_exact(mdp_hat, _full_policy(probs, mdp_hat))
    _, j_beh = evaluate_policy_exact(mdp_hat, _full_policy(behavior.probs, mdp_hat))
    return SpibbResult(out, behavior, counts, j_out, j_beh, mdp_hat)


def write_trace_csv(rows: list[dict], path: str) -> None:
    import io

    from .envs import atomic_write

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in TRACE_COLUMNS})
    atomic_write(path, buf.getvalue())
