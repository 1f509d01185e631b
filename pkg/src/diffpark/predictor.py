"""Physics-informed variational motion predictor.

An MLP encoder maps a reversed state plus guidance to a Gaussian over the previous action;
a reparameterised sample is pushed through the deterministic bicycle step (the decoder) and
compared with the true previous reversed state.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dynamics import (
    ACTION_DIM,
    STATE_DIM,
    ActionCommand,
    DynamicsParams,
    GuidanceFeatures,
    VehicleState,
    step_action_jacobian,
    step_batch,
    wrap_angle,
)
from .errors import ConfigError, DomainError, SchemaError, TrainingError, UsageError
from .forward import TrajectoryDataset, rollback_arrays
from .nn import MlpParams, adam_init, adam_step, init_mlp, mlp_backward, mlp_forward, mlp_from_dict, mlp_to_dict

log = logging.getLogger(__name__)

INPUT_DIM = STATE_DIM + 2
MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    lambda1: float = 0.1
    lambda2: float = 0.05
    eps: float = 1e-4
    val_fraction: float = 0.1
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    log_sigma_init: float = math.log(0.1 ** 2)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("train.lambda1 and train.lambda2 must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in (0, 1)")
        if not 0 < self.eps < 0.5:
            raise ConfigError("train.eps must lie in (0, 0.5)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class PredictorParams:
    encoder: MlpParams
    log_sigma: np.ndarray  # per-state-element log transition-noise variance
    in_shift: np.ndarray = field(default_factory=lambda: np.zeros(INPUT_DIM))
    in_scale: np.ndarray = field(default_factory=lambda: np.ones(INPUT_DIM))
    eps: float = 1e-4

    def __post_init__(self):
        sizes = self.encoder.sizes
        if sizes[0] != INPUT_DIM or sizes[-1] != 2 * ACTION_DIM:
            raise SchemaError(f"encoder must map {INPUT_DIM} -> {2 * ACTION_DIM}, got {sizes[0]} -> {sizes[-1]}")
        self.log_sigma = np.asarray(self.log_sigma, dtype=float).reshape(STATE_DIM)

    @property
    def Sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + [self.log_sigma]

    def with_arrays(self, arrays) -> "PredictorParams":
        return PredictorParams(self.encoder.with_arrays(arrays[:-1]), arrays[-1],
                               self.in_shift, self.in_scale, self.eps)

    def copy(self) -> "PredictorParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


@dataclass(frozen=True)
class ActionDistribution:
    mean: ActionCommand
    sigma: tuple[float, float]


def init_predictor(rng: np.random.Generator, cfg: TrainConfig = TrainConfig(),
                   states: Optional[np.ndarray] = None, guid: Optional[np.ndarray] = None) -> PredictorParams:
    """Fresh predictor; input standardisation is fitted to ``states``/``guid`` when given."""
    enc = init_mlp([INPUT_DIM, *cfg.hidden, 2 * ACTION_DIM], rng, "tanh")
    shift, scale = np.zeros(INPUT_DIM), np.ones(INPUT_DIM)
    if states is not None and guid is not None and len(states):
        feats = np.concatenate([states, guid], axis=1)
        shift = feats.mean(axis=0)
        scale = np.where(feats.std(axis=0) > 1e-6, feats.std(axis=0), 1.0)
    return PredictorParams(enc, np.full(STATE_DIM, cfg.log_sigma_init), shift, scale, cfg.eps)


# ---------------------------------------------------------------- encoder

def _features(p: PredictorParams, states, guid) -> np.ndarray:
    x = np.concatenate([np.asarray(states, dtype=float), np.asarray(guid, dtype=float)], axis=-1)
    return (x - p.in_shift) / p.in_scale


def _squash(u: np.ndarray, dyn: DynamicsParams, eps: float):
    mid = 0.5 * (dyn.lb + dyn.ub)
    half = 0.5 * (dyn.ub - dyn.lb)
    tm = np.tanh(u[..., :ACTION_DIM])
    sg = 1.0 / (1.0 + np.exp(-np.clip(u[..., ACTION_DIM:], -30.0, 30.0)))
    mean = mid + half * tm
    sigma = eps + (1.0 - 2.0 * eps) * sg
    dmean = half * (1.0 - tm * tm)
    dsigma = (1.0 - 2.0 * eps) * sg * (1.0 - sg)
    return mean, sigma, dmean, dsigma


def encode_batch(p: PredictorParams, states, guid, dyn: DynamicsParams):
    """Return ``(mean, sigma, aux)`` for batches of states (n, 5) and guidance (n, 2)."""
    u, cache = mlp_forward(p.encoder, _features(p, states, guid))
    mean, sigma, dmean, dsigma = _squash(u, dyn, p.eps)
    return mean, sigma, (cache, dmean, dsigma)


def encode(p: PredictorParams, s_rev: VehicleState, g: GuidanceFeatures, dyn: DynamicsParams) -> ActionDistribution:
    mean, sigma, _ = encode_batch(p, s_rev.as_array()[None], np.array([[g.theta, g.l]]), dyn)
    return ActionDistribution(ActionCommand.from_array(mean[0]), (float(sigma[0, 0]), float(sigma[0, 1])))


def reparameterize_batch(mean, sigma, noise, dyn: DynamicsParams):
    """``mean + sigma * noise`` clipped to the action bounds; also returns the in-bounds mask."""
    raw = np.asarray(mean) + np.asarray(sigma) * np.asarray(noise)
    inside = (raw >= dyn.lb) & (raw <= dyn.ub)
    return np.clip(raw, dyn.lb, dyn.ub), inside


def reparameterize(d: ActionDistribution, noise, dyn: DynamicsParams) -> ActionCommand:
    z, _ = reparameterize_batch(d.mean.as_array(), np.asarray(d.sigma), np.asarray(noise, dtype=float), dyn)
    return ActionCommand.from_array(z)


def decode_physics(s_rev: VehicleState, z: ActionCommand, dyn: DynamicsParams) -> VehicleState:
    """The decoder is exactly one deterministic bicycle step."""
    return VehicleState.from_array(step_batch(s_rev.as_array(), z.as_array(), dyn))


def decode_jacobian(s_rev: VehicleState, z: ActionCommand, dyn: DynamicsParams) -> np.ndarray:
    return step_action_jacobian(s_rev.as_array(), z.as_array(), dyn)


# ---------------------------------------------------------------- loss

def state_residual(pred, truth) -> np.ndarray:
    """``pred - truth`` with the heading difference wrapped to [-pi, pi)."""
    d = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    d[..., 4] = wrap_angle(d[..., 4])
    return d


@dataclass(frozen=True)
class LossTerms:
    total: float
    mse: float
    r_a: float
    r_eps: float  # fit part plus log-normaliser
    r_eps_fit: float  # quadratic part only, always >= 0


def action_variance_penalty(sigma, eps: float = 1e-4):
    sigma = np.asarray(sigma, dtype=float)
    return -np.mean(np.log(sigma + eps) + np.log(1.0 - sigma - eps))


def vae_loss(pred, truth, sigma_a, Sigma, lam1: float, lam2: float, eps: float = 1e-4):
    """Three-term loss: reconstruction MSE, action-variance regulariser, Gaussian noise likelihood.

    ``pred``/``truth`` are (..., 5); ``sigma_a`` (..., 2) action stds; ``Sigma`` (5,) noise variances.
    Returns ``(LossTerms, dpred, dsigma_a, dSigma)``.
    """
    sigma_a = np.asarray(sigma_a, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if np.any(sigma_a <= eps) or np.any(sigma_a >= 1.0 - eps):
        raise DomainError("action sigma must lie strictly inside (eps, 1 - eps)")
    if np.any(Sigma <= 0):
        raise DomainError("noise variances must be > 0")
    d = state_residual(pred, truth)
    n_el = d.size
    mse = float(np.sum(d * d) / n_el)
    r_a = float(action_variance_penalty(sigma_a, eps))
    fit = float(np.sum(d * d / (2.0 * Sigma)) / n_el)
    norm = float(0.5 * np.mean(np.log(Sigma)))
    total = mse + lam1 * r_a + lam2 * (fit + norm)

    dpred = (2.0 / n_el) * d + lam2 * d / (Sigma * n_el)
    dsig = lam1 * (-(1.0 / (sigma_a + eps) - 1.0 / (1.0 - sigma_a - eps)) / sigma_a.size)
    dSigma = lam2 * (-np.sum(d * d, axis=tuple(range(d.ndim - 1))) / (2.0 * Sigma ** 2 * n_el)
                     + 0.5 / (Sigma * STATE_DIM))
    return LossTerms(total, mse, r_a, fit + norm, fit), dpred, dsig, dSigma


def loss_and_grads(p: PredictorParams, states, guid, targets, noise, dyn: DynamicsParams,
                   lam1: float, lam2: float):
    """Full forward pass and exact gradients w.r.t. ``p.arrays()`` at fixed reparameterisation noise."""
    mean, sigma, (cache, dmean, dsigma) = encode_batch(p, states, guid, dyn)
    z, inside = reparameterize_batch(mean, sigma, noise, dyn)
    pred = step_batch(states, z, dyn)
    terms, dpred, dsig_reg, dSigma = vae_loss(pred, targets, sigma, p.Sigma, lam1, lam2, p.eps)
    jac = step_action_jacobian(states, z, dyn)
    dz = np.einsum("ne,nea->na", dpred, jac) * inside
    du = np.concatenate([dz * dmean, (dz * noise + dsig_reg) * dsigma], axis=1)
    genc, _ = mlp_backward(p.encoder, cache, du)
    grads = genc.arrays() + [dSigma * p.Sigma]
    return terms, grads, pred


# ---------------------------------------------------------------- training

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_mse: float
    val_mse: float


def split_by_trial(d: TrajectoryDataset, val_fraction: float, seed: int):
    trials = d.trial_ids()
    if len(trials) < 2:
        return d, d
    rng = np.random.default_rng(seed)
    order = rng.permutation(trials)
    n_val = min(len(trials) - 1, max(1, int(round(val_fraction * len(trials)))))
    val = set(int(t) for t in order[:n_val])
    return d.subset(t for t in trials if t not in val), d.subset(val)


def train_arrays(
    train_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: TrainConfig,
    dyn: DynamicsParams,
    init: Optional[PredictorParams] = None,
    anchor_weight: float = 0.0,
) -> tuple[PredictorParams, list[EpochStats]]:
    """Mini-batch Adam on the three-term loss.

    When ``init`` is given training starts from it, and ``anchor_weight`` pulls parameters back
    towards it with ``anchor_weight * ||phi - phi_init||^2``.
    """
    S, G, T = train_data
    Sv, Gv, Tv = val_data
    if len(S) == 0:
        raise UsageError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    p = init.copy() if init is not None else init_predictor(rng, cfg, S, G)
    anchor = [a.copy() for a in p.arrays()] if init is not None else None
    st = adam_init(p.arrays(), lr=cfg.lr)
    val_noise = np.random.default_rng(cfg.seed + 1).standard_normal((len(Sv), ACTION_DIM))
    history: list[EpochStats] = []
    n = len(S)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        noise = rng.standard_normal((n, ACTION_DIM))
        tot = mse = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            terms, grads, _ = loss_and_grads(p, S[idx], G[idx], T[idx], noise[idx], dyn, cfg.lambda1, cfg.lambda2)
            if not math.isfinite(terms.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}, records {idx[:5].tolist()}...")
            arrays, st = adam_step(p.arrays(), grads, st, anchor, anchor_weight)
            p = p.with_arrays(arrays)
            tot += terms.total * len(idx)
            mse += terms.mse * len(idx)
        vterms, _, _ = loss_and_grads(p, Sv, Gv, Tv, val_noise, dyn, cfg.lambda1, cfg.lambda2)
        history.append(EpochStats(epoch, tot / n, vterms.total, mse / n, vterms.mse))
    return p, history


def train(
    data: TrajectoryDataset,
    cfg: TrainConfig = TrainConfig(),
    dyn: Optional[DynamicsParams] = None,
) -> tuple[PredictorParams, list[EpochStats], TrajectoryDataset]:
    """Train on a reversed dataset; returns params, loss history and the held-out split."""
    dyn = dyn or DynamicsParams()
    if not data.records:
        raise UsageError("reversed dataset is empty")
    tr, va = split_by_trial(data, cfg.val_fraction, cfg.seed)
    p, hist = train_arrays(rollback_arrays(tr), rollback_arrays(va), cfg, dyn)
    return p, hist, va


# ---------------------------------------------------------------- evaluation

def predictive_moments(p: PredictorParams, states, guid, dyn: DynamicsParams):
    """Mean next state (decoder at the mean action) and per-element predictive std.

    The std propagates the action std through the decoder Jacobian and adds the
    transition-noise variance.
    """
    mean, sigma, _ = encode_batch(p, states, guid, dyn)
    pred = step_batch(states, mean, dyn)
    jac = step_action_jacobian(states, mean, dyn)
    var = np.einsum("nea,na->ne", jac ** 2, sigma ** 2) + p.Sigma
    return pred, np.sqrt(var), mean, sigma


def coverage_from_moments(mean_pred, std, truth, ks=(1, 2, 3)) -> dict[int, float]:
    z = np.abs(state_residual(truth, mean_pred)) / std
    return {k: float(np.mean(z <= k)) for k in ks}


def evaluate(p: PredictorParams, states, guid, targets, dyn: DynamicsParams,
             rng: np.random.Generator, seed: Optional[int] = None) -> dict:
    if len(states) == 0:
        raise UsageError("evaluation set is empty")
    mean, sigma, _ = encode_batch(p, states, guid, dyn)
    z, _ = reparameterize_batch(mean, sigma, rng.standard_normal(mean.shape), dyn)
    sampled = step_batch(states, z, dyn)
    resid = state_residual(sampled, targets)
    per_el = np.mean(resid ** 2, axis=0)
    mp, std, _, _ = predictive_moments(p, states, guid, dyn)
    cov = coverage_from_moments(mp, std, targets)
    return {
        "mse": float(np.mean(per_el)),
        "coverage_1": cov[1],
        "coverage_2": cov[2],
        "coverage_3": cov[3],
        "per_element_mse": {k: float(v) for k, v in zip(("x", "y", "vx", "vy", "h"), per_el)},
        "n_samples": int(len(states)),
        "seed": seed,
    }


# ---------------------------------------------------------------- model file

def model_to_dict(p: PredictorParams, dyn: DynamicsParams, cfg: Optional[TrainConfig] = None,
                  extra: Optional[dict] = None) -> dict:
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "encoder": mlp_to_dict(p.encoder),
        "log_sigma": p.log_sigma.tolist(),
        "input_shift": p.in_shift.tolist(),
        "input_scale": p.in_scale.tolist(),
        "eps": p.eps,
        "action_dim": ACTION_DIM,
        "state_dim": STATE_DIM,
        "dynamics": asdict(dyn),
        "train_config": asdict(cfg) if cfg is not None else None,
        **(extra or {}),
    }


def model_from_dict(d: dict) -> tuple[PredictorParams, DynamicsParams]:
    if d.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise SchemaError("unsupported model schema version")
    if d.get("action_dim") != ACTION_DIM or d.get("state_dim") != STATE_DIM:
        raise SchemaError(f"model dimensions (state {d.get('state_dim')}, action {d.get('action_dim')}) "
                          f"do not match ({STATE_DIM}, {ACTION_DIM})")
    try:
        dyn_d = dict(d["dynamics"])
        for k in ("throttle_bounds", "steer_bounds", "footprint"):
            dyn_d[k] = tuple(dyn_d[k])
        dyn = DynamicsParams(**dyn_d)
        p = PredictorParams(mlp_from_dict(d["encoder"]), np.asarray(d["log_sigma"], dtype=float),
                            np.asarray(d["input_shift"], dtype=float), np.asarray(d["input_scale"], dtype=float),
                            float(d["eps"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model file: {exc}") from exc
    return p, dyn


def save_model(path, p: PredictorParams, dyn: DynamicsParams, cfg: Optional[TrainConfig] = None,
               extra: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(p, dyn, cfg, extra), fh)


def load_model(path) -> tuple[PredictorParams, DynamicsParams]:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc.msg})") from exc
    return model_from_dict(d)
