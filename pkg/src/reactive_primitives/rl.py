"""Reinforcement learning refinement of a PMNN feedback model.

The outer loop turns the current adaptive behavior into a low-dimensional DMP
policy, explores around it with PI^2-CMA, rolls out the improved policy, and
adds that rollout to the supervised data of the feedback model.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import quat
from .dmp import DmpParams, ExpectedSensorTraces, Rollout, extract_target_coupling, fit_forcing_term, unroll
from .pmnn import FeedbackDataset, PmnnParams, TrainConfig, pmnn_train

log = logging.getLogger(__name__)

DEFAULT_K = 38
PSD_FLOOR = 1e-12
SIGMA0_FRACTION = 0.05
LAMBDA_DIVISOR = 10.0
STALL_ITERS = 3


class CovarianceWarning(RuntimeWarning):
    pass


class StallWarning(RuntimeWarning):
    pass


def step_cost(Q_nr: np.ndarray, Q_cr: np.ndarray) -> float:
    """``||2 log(Q_nr o Q_cr*)||`` along the shorter arc, in radians."""
    return float(np.linalg.norm(quat.rotvec_between(quat.check_unit(Q_nr), quat.check_unit(Q_cr))))


@dataclass
class LowDimPolicy:
    """Gaussian over forcing weights ``theta`` (N x D).

    ``Sigma`` is indexed in dimension-major order: entry ``d * N + i`` belongs
    to kernel ``i`` of dimension ``d``, so a block-diagonal covariance has
    one ``N x N`` block per dimension.
    """

    theta: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim == 1:
            self.theta = self.theta[:, None]
        n = self.theta.size
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if self.Sigma.shape != (n, n):
            raise ValueError(f"Sigma must be {n}x{n}, got {self.Sigma.shape}")
        if not np.allclose(self.Sigma, self.Sigma.T, atol=1e-12 * max(1.0, np.abs(self.Sigma).max())):
            raise ValueError("Sigma must be symmetric")

    @property
    def n_kernels(self) -> int:
        return self.theta.shape[0]

    @property
    def n_dims(self) -> int:
        return self.theta.shape[1]

    def flat(self) -> np.ndarray:
        return self.theta.T.ravel()

    def unflat(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        return v.reshape(*v.shape[:-1], self.n_dims, self.n_kernels).swapaxes(-1, -2)


def initial_covariance(theta: np.ndarray, fraction: float = SIGMA0_FRACTION) -> np.ndarray:
    """``sigma^2 I`` with ``sigma`` a fraction of the RMS of ``theta``."""
    theta = np.asarray(theta, dtype=float)
    sigma = fraction * float(np.sqrt(np.mean(theta**2)))
    return sigma**2 * np.eye(theta.size)


def correction_covariance(theta: np.ndarray, theta_nominal: np.ndarray, fraction: float = 0.25) -> np.ndarray:
    """``sigma^2 I`` with ``sigma`` a fraction of the RMS of ``theta - theta_nominal``.

    Scales exploration to the size of the correction already present in the
    compressed adaptive behavior rather than to the nominal motion.
    """
    d = np.asarray(theta, dtype=float) - np.asarray(theta_nominal, dtype=float)
    sigma = fraction * float(np.sqrt(np.mean(d**2)))
    if sigma <= 0:
        raise ValueError("adaptive behavior carries no correction to scale exploration by")
    return sigma**2 * np.eye(d.size)


def compress_rollout(roll: Rollout, nominal: DmpParams) -> DmpParams:
    """Fit a fresh primitive to one adaptive rollout.

    Its forcing weights absorb whatever coupling shaped the rollout, so
    re-unrolling them without feedback reproduces the adaptive behavior.
    """
    if not roll.valid:
        raise ValueError("cannot compress an aborted rollout")
    return fit_forcing_term([roll], nominal.bank, goal=nominal.goal)


def _repair_psd(Sigma: np.ndarray) -> np.ndarray:
    Sigma = 0.5 * (Sigma + Sigma.T)
    vals, vecs = np.linalg.eigh(Sigma)
    if vals.min() < -PSD_FLOOR * max(1.0, vals.max()):
        warnings.warn(f"exploration covariance not PSD (min eigenvalue {vals.min():.3g}); flooring", CovarianceWarning)
        vals = np.maximum(vals, PSD_FLOOR)
        Sigma = (vecs * vals) @ vecs.T
    return Sigma


def sample_policies(policy: LowDimPolicy, K: int, seed=None) -> np.ndarray:
    """``K`` weight matrices drawn from ``N(theta, Sigma)``; shape ``(K, N, D)``."""
    if K < 2:
        raise ValueError("need at least two samples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Sigma = _repair_psd(policy.Sigma)
    vals, vecs = np.linalg.eigh(Sigma)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    eps = rng.standard_normal((K, len(vals))) @ root.T
    return policy.unflat(policy.flat() + eps)


def cost_to_go(costs: np.ndarray, full_sum: bool = False) -> np.ndarray:
    """``S[k, t]``: tail sum of ``J[k, t:]``, or the whole-horizon sum for every
    ``t`` with ``full_sum``."""
    costs = np.asarray(costs, dtype=float)
    if full_sum:
        return np.repeat(costs.sum(axis=1, keepdims=True), costs.shape[1], axis=1)
    return np.cumsum(costs[:, ::-1], axis=1)[:, ::-1]


def default_lambda(S: np.ndarray) -> float:
    """Temperature from the widest per-step spread of cost-to-go."""
    spread = float(np.max(S.max(axis=0) - S.min(axis=0)))
    return spread / LAMBDA_DIVISOR if spread > 0 else 1.0


def probabilities(S: np.ndarray, lam: float) -> np.ndarray:
    """Softmax of ``-S / lam`` over samples at each step, max-shifted."""
    if not lam > 0:
        raise ValueError("temperature must be positive")
    z = -(S - S.min(axis=0, keepdims=True)) / lam
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


@dataclass
class Pi2Update:
    theta: np.ndarray  # flat
    Sigma: np.ndarray
    lam: float
    P: np.ndarray


def pi2_cma_update(
    samples: np.ndarray,
    costs: np.ndarray,
    mean: np.ndarray,
    lam: Optional[float] = None,
    full_sum: bool = False,
) -> Pi2Update:
    """One PI^2-CMA update.

    ``samples`` is ``(K, n)`` (flattened parameters), ``costs`` ``(K, T)`` and
    ``mean`` the pre-update ``(n,)`` mean used for the covariance. Per step
    ``t`` the samples are averaged with probabilities from the cost-to-go;
    the per-step estimates are then averaged with weights ``T - 1 - t``
    (0-based), which favour early steps whose cost-to-go covers the most.
    """
    samples = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    costs = np.asarray(costs, dtype=float)
    mean = np.asarray(mean, dtype=float).ravel()
    K, T = costs.shape
    if len(samples) != K:
        raise ValueError("one cost row per sample required")
    if T < 2:
        raise ValueError("need at least two time steps for the time weighting")
    S = cost_to_go(costs, full_sum)
    if lam is None:
        lam = default_lambda(S)
    P = probabilities(S, lam)  # (K, T)
    theta_t = P.T @ samples  # (T, n)
    dev = samples - mean
    w = (T - 1 - np.arange(T)).astype(float)
    w /= w.sum()
    theta_new = w @ theta_t
    # Sum_t w_t Sum_k P_kt dev_k dev_k^T = Sum_k (Sum_t w_t P_kt) dev_k dev_k^T
    pk = P @ w
    Sigma_new = (dev * pk[:, None]).T @ dev
    return Pi2Update(theta_new, 0.5 * (Sigma_new + Sigma_new.T), float(lam), P)


@dataclass
class RlConfig:
    K: int = DEFAULT_K
    lam: Optional[float] = None
    max_iters: int = 2
    seed: int = 0
    sigma0_fraction: float = SIGMA0_FRACTION
    sigma0_reference: str = "nominal"  # or "correction"
    full_sum: bool = False
    coupling_axes: tuple = (0,)
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    warm_start: bool = True
    additional_weight: float = 1.0  # loss weight of RL-generated rows
    log_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RlConfig":
        d = dict(d)
        if "retrain" in d and isinstance(d["retrain"], dict):
            d["retrain"] = TrainConfig.from_dict(d["retrain"])
        if "coupling_axes" in d:
            d["coupling_axes"] = tuple(d["coupling_axes"])
        return cls(**d)


@dataclass
class RlState:
    pmnn: PmnnParams
    base_dataset: FeedbackDataset
    additional: list = field(default_factory=list)  # FeedbackDataset per iteration
    iteration: int = 0
    J_thr: float = 0.0

    def training_data(self) -> FeedbackDataset:
        return FeedbackDataset.concat([self.base_dataset, *self.additional])


@dataclass
class RlResult:
    pmnn: PmnnParams
    history: list  # per-iteration records
    state: RlState
    rollouts_per_iter: list
    stalled: bool = False


def _coupling_rows(roll: Rollout, nominal: DmpParams, axes, group: int, weight: float = 1.0) -> FeedbackDataset:
    target = extract_target_coupling(roll, nominal, roll.phase)[:, list(axes)]
    return FeedbackDataset(roll.ds, roll.phase, target, np.full(len(roll), group), np.full(len(roll), weight))


class _Counter:
    """Counts plant rollouts so the per-iteration budget can be checked."""

    def __init__(self):
        self.n = 0

    def unroll(self, *args, **kwargs) -> Rollout:
        self.n += 1
        return unroll(*args, **kwargs)


def rl_feedback(
    nominal: DmpParams,
    pmnn: PmnnParams,
    D_cdemo: FeedbackDataset,
    expected: Optional[ExpectedSensorTraces],
    Sigma0: Optional[np.ndarray],
    J_thr: float,
    plant,
    config: Optional[RlConfig] = None,
) -> RlResult:
    """Refine ``pmnn`` on one fixed plant setting.

    Each iteration spends exactly ``K + 2`` plant rollouts: ``K`` explorations,
    one rollout of the improved low-dimensional policy, and one evaluation of
    the retrained feedback model. The loop ends when the cost norm reaches
    ``J_thr``, after ``max_iters`` iterations, or when the cost has not
    decreased for three consecutive iterations (best model returned).
    """
    cfg = RlConfig() if config is None else config
    axes = list(cfg.coupling_axes)
    rng = np.random.default_rng(cfg.seed)
    state = RlState(pmnn=pmnn, base_dataset=D_cdemo, J_thr=J_thr)
    counter = _Counter()
    log_file = open(cfg.log_path, "a") if cfg.log_path else None
    ckpt = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    def emit(rec):
        history.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()

    history: list = []
    roll = counter.unroll(nominal, pmnn, expected, plant, coupling_axes=axes)
    J = roll.cost_norm()
    emit({"iteration": 0, "cost_norm": J, "rollouts": counter.n})
    best = (J, pmnn)
    Sigma = Sigma0
    stall = 0
    stalled = False
    per_iter = []
    try:
        while J > J_thr and state.iteration < cfg.max_iters:
            counter.n = 0
            cdmp = compress_rollout(roll, nominal)
            theta_full = cdmp.weights.copy()
            if Sigma is None:
                if cfg.sigma0_reference == "correction":
                    Sigma = correction_covariance(theta_full[:, axes], nominal.weights[:, axes], cfg.sigma0_fraction)
                else:
                    Sigma = initial_covariance(nominal.weights[:, axes], cfg.sigma0_fraction)
            policy = LowDimPolicy(theta_full[:, axes], Sigma)
            samples = sample_policies(policy, cfg.K, rng)
            sample_costs = []
            for th in samples:
                w = theta_full.copy()
                w[:, axes] = th
                r = counter.unroll(cdmp, None, expected, plant, extra_weights=w, coupling_axes=axes)
                if not r.valid:
                    raise RuntimeError("plant aborted an exploration rollout")
                sample_costs.append(r.costs)
            sample_costs = np.array(sample_costs)
            upd = pi2_cma_update(samples.swapaxes(1, 2).reshape(cfg.K, -1), sample_costs, policy.flat(), cfg.lam, cfg.full_sum)
            Sigma = _repair_psd(upd.Sigma)
            w_new = theta_full.copy()
            w_new[:, axes] = policy.unflat(upd.theta)
            improved = counter.unroll(cdmp, None, expected, plant, extra_weights=w_new, coupling_axes=axes)
            state.iteration += 1
            state.additional.append(_coupling_rows(improved, nominal, axes, -state.iteration, cfg.additional_weight))
            train_cfg = TrainConfig(**{**cfg.retrain.__dict__, "seed": cfg.retrain.seed + state.iteration})
            res = pmnn_train(state.training_data(), train_cfg, init=state.pmnn if cfg.warm_start else None, bank=pmnn.bank)
            state.pmnn = res.params
            roll = counter.unroll(nominal, state.pmnn, expected, plant, coupling_axes=axes)
            J_prev, J = J, roll.cost_norm()
            per_iter.append(counter.n)
            emit(
                {
                    "iteration": state.iteration,
                    "cost_norm": J,
                    "improved_policy_cost_norm": improved.cost_norm(),
                    "lambda": upd.lam,
                    "sigma_trace": float(np.trace(Sigma)),
                    "sample_cost_norms": np.linalg.norm(sample_costs, axis=1).tolist(),
                    "rows": len(state.training_data()),
                    "rollouts": counter.n,
                }
            )
            if ckpt is not None:
                (ckpt / f"pmnn_iter{state.iteration}.json").write_text(json.dumps(state.pmnn.to_dict()))
            if J < best[0]:
                best = (J, state.pmnn)
            stall = stall + 1 if J >= J_prev else 0
            if stall >= STALL_ITERS:
                warnings.warn("cost norm did not decrease for 3 iterations; returning the best model", StallWarning)
                stalled = True
                break
    finally:
        if log_file is not None:
            log_file.close()
    final = best[1] if stalled else state.pmnn
    return RlResult(pmnn=final, history=history, state=state, rollouts_per_iter=per_iter, stalled=stalled)
