"""Encoder pretraining on normalized action prediction, and the frozen-encoder
artifact consumed by the downstream agents."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import numerics
from .envs import OfflineDataset, atomic_write
from .errors import (
    ContractViolationError,
    RejectedInputError,
    TrainingDivergenceError,
    UnusableDatasetError,
)


@dataclass
class PretrainConfig:
    steps: int = 100_000
    batch_size: int = 256
    seed: int = 0
    repr_dim: int = 64
    learning_rate: float = 3e-4
    min_action_norm: float = 1e-6
    encoder_hidden: tuple[int, ...] = (256, 256)
    predictor_hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.repr_dim <= 0:
            raise RejectedInputError("invalid pretrain config")


class EncoderModel:
    """State encoder. Once frozen its parameters are read-only."""

    def __init__(self, net: numerics.MlpModel, frozen: bool = False):
        self.net = net
        self.frozen = frozen
        if frozen:
            self._lock()

    def _lock(self):
        for p in self.net.parameters():
            p.setflags(write=False)

    def freeze(self) -> "EncoderModel":
        self.frozen = True
        self._lock()
        return self

    @property
    def state_dim(self) -> int:
        return self.net.input_dim

    @property
    def repr_dim(self) -> int:
        return self.net.output_dim

    def encode(self, state: np.ndarray) -> np.ndarray:
        z, _ = numerics.forward(self.net, state)
        return z

    def param_hash(self) -> str:
        return hashlib.sha256(numerics.checkpoint_bytes(self.net)).hexdigest()

    def copy(self, frozen: bool | None = None) -> "EncoderModel":
        return EncoderModel(self.net.copy(), self.frozen if frozen is None else frozen)


class PredictorModel:
    """Representation -> action head: two hidden ReLU layers, final tanh."""

    def __init__(self, net: numerics.MlpModel):
        if net.layers[-1].activation != "tanh":
            raise RejectedInputError("predictor must end with tanh")
        self.net = net

    @classmethod
    def build(cls, repr_dim: int, action_dim: int, hidden: tuple[int, ...],
              rng: np.random.Generator) -> "PredictorModel":
        dims = [repr_dim, *hidden, action_dim]
        acts = ["relu"] * len(hidden) + ["tanh"]
        return cls(numerics.init_mlp(dims, acts, rng))


def build_encoder(state_dim: int, repr_dim: int, hidden: tuple[int, ...],
                  rng: np.random.Generator) -> EncoderModel:
    dims = [state_dim, *hidden, repr_dim]
    acts = ["relu"] * len(hidden) + ["identity"]
    return EncoderModel(numerics.init_mlp(dims, acts, rng))


def bpr_loss(prediction: np.ndarray, action: np.ndarray,
             min_action_norm: float = 1e-6) -> tuple[float, np.ndarray]:
    """||y_hat - a_hat||^2 with both arguments l2-normalized; the action is a
    constant target, so the gradient only flows through the prediction's
    normalization Jacobian. Works on single vectors or (n, k) batches, where
    the batch loss is the per-sample mean."""
    y = np.asarray(prediction, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    if y.shape != a.shape:
        raise RejectedInputError("prediction/action shape mismatch")
    single = y.ndim == 1
    ab = a[None, :] if single else a
    norms = np.linalg.norm(ab, axis=1)
    if np.any(norms < min_action_norm):
        raise ContractViolationError("action norm below min_action_norm reached the loss")
    a_bar = ab / norms[:, None]
    y_bar, back = numerics.l2_normalize_with_grad(y)
    yb = y_bar[None, :] if single else y_bar
    diff = yb - a_bar
    per_sample = np.sum(diff * diff, axis=1)
    n = per_sample.shape[0]
    loss = float(per_sample.mean())
    g_ybar = 2.0 * diff / n
    grad = back(g_ybar[0] if single else g_ybar)
    return loss, grad


def unnormalized_bc_loss(prediction: np.ndarray, action: np.ndarray) -> float:
    """Plain squared error ||y - a||^2 (per-sample mean on batches)."""
    y = np.asarray(prediction, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    if y.shape != a.shape:
        raise RejectedInputError("prediction/action shape mismatch")
    diff = y - a
    if y.ndim == 1:
        return float(np.sum(diff * diff))
    return float(np.sum(diff * diff, axis=1).mean())


def bpr_batch_grads(encoder: EncoderModel, predictor: PredictorModel,
                    states: np.ndarray, actions: np.ndarray,
                    min_action_norm: float = 1e-6):
    """One joint forward/backward of the normalized prediction loss.
    Returns (loss, encoder grads, predictor grads)."""
    z, enc_cache = numerics.forward(encoder.net, states)
    y, pred_cache = numerics.forward(predictor.net, z)
    loss, gy = bpr_loss(y, actions, min_action_norm)
    pred_grads, gz = numerics.backward(predictor.net, pred_cache, gy)
    enc_grads, _ = numerics.backward(encoder.net, enc_cache, gz)
    return loss, enc_grads, pred_grads


def filter_zero_norm_actions(dataset: OfflineDataset, min_action_norm: float):
    s, a, _, _, _ = dataset.arrays()
    keep = np.linalg.norm(a, axis=1) >= min_action_norm
    return s[keep], a[keep], int(np.sum(~keep))


def pretrain(dataset: OfflineDataset, config: PretrainConfig):
    """Joint minibatch Adam on encoder + predictor; returns the frozen encoder,
    the per-step loss trace, and the (diagnostic) predictor."""
    states, actions, n_dropped = filter_zero_norm_actions(dataset, config.min_action_norm)
    if states.shape[0] == 0:
        raise UnusableDatasetError("all actions below min_action_norm")
    rng = np.random.default_rng(config.seed)
    encoder = build_encoder(dataset.state_dim, config.repr_dim, config.encoder_hidden, rng)
    predictor = PredictorModel.build(config.repr_dim, dataset.action_dim,
                                     config.predictor_hidden, rng)
    params = encoder.net.parameters() + predictor.net.parameters()
    adam = numerics.AdamState.for_params(params, learning_rate=config.learning_rate)
    n_enc = len(encoder.net.parameters())
    trace = np.zeros(config.steps)
    for step in range(config.steps):
        idx = rng.integers(0, states.shape[0], size=config.batch_size)
        loss, enc_grads, pred_grads = bpr_batch_grads(
            encoder, predictor, states[idx], actions[idx], config.min_action_norm
        )
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite pretrain loss at step {step}")
        params = adam_update(adam, encoder, predictor, enc_grads, pred_grads, n_enc)
        trace[step] = loss
    encoder.freeze()
    return encoder, trace, predictor, n_dropped


def adam_update(adam, encoder, predictor, enc_grads, pred_grads, n_enc):
    params = encoder.net.parameters() + predictor.net.parameters()
    new = numerics.adam_step(adam, params, enc_grads + pred_grads)
    encoder.net.set_parameters(new[:n_enc])
    predictor.net.set_parameters(new[n_enc:])
    return new


def dataset_hash(dataset: OfflineDataset) -> str:
    h = hashlib.sha256()
    for arr in dataset.arrays():
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_encoder(encoder: EncoderModel, path: str, manifest: dict | None = None) -> None:
    atomic_write(path, numerics.checkpoint_bytes(encoder.net))
    if manifest is not None:
        atomic_write(path + ".json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_encoder(path: str, frozen: bool = True) -> EncoderModel:
    return EncoderModel(numerics.load_checkpoint(path), frozen=frozen)


def make_manifest(config: PretrainConfig, dataset: OfflineDataset,
                  final_loss: float) -> dict:
    return {
        "schema_version": 1,
        "repr_dim": config.repr_dim,
        "state_dim": dataset.state_dim,
        "pretrain_steps": config.steps,
        "seed": config.seed,
        "final_loss": final_loss,
        "dataset_hash": dataset_hash(dataset),
    }
