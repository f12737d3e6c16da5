"""Quaternion DMPs: transformation system, fitting, coupling extraction, unrolling.

Also holds the multi-channel linear DMP that encodes expected sensor traces.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.signal import savgol_filter

from . import quat
from .canonical import (
    STEPS_PER_TAU,
    CanonicalState,
    KernelBank,
    canonical_step,
    canonical_trajectory,
    default_bank,
    phase_modulation,
)

log = logging.getLogger(__name__)

ALPHA_W = 25.0
BETA_W = ALPHA_W / 4.0
ALPHA_G = ALPHA_W / 2.0

# Unroll horizon in units of tau.
HORIZON = 1.1
RIDGE = 1e-8


class RegressionError(ValueError):
    """Forcing-term regression could not be set up or solved."""


class PlantError(RuntimeError):
    """Raised by a plant that cannot produce an observation."""


def horizon_steps(tau: float, dt: Optional[float] = None) -> tuple[float, int]:
    """Default ``(dt, n_steps)`` for unrolling a primitive of duration tau."""
    if dt is None:
        dt = tau / STEPS_PER_TAU
    return dt, int(round(HORIZON * tau / dt)) + 1


@dataclass(frozen=True)
class DmpParams:
    """One quaternion primitive. ``weights`` has shape ``(N, 3)``."""

    weights: np.ndarray
    tau: float
    start: np.ndarray
    goal: np.ndarray
    bank: KernelBank

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != self.bank.n:
            raise ValueError(f"weights must be (N, D) with N={self.bank.n}, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "start", quat.check_unit(self.start))
        object.__setattr__(self, "goal", quat.check_unit(self.goal))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "tau": self.tau,
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "bank": self.bank.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DmpParams":
        return cls(
            weights=np.array(d["weights"], dtype=float),
            tau=float(d["tau"]),
            start=np.array(d["start"], dtype=float),
            goal=np.array(d["goal"], dtype=float),
            bank=KernelBank.from_dict(d["bank"]),
        )


@dataclass(frozen=True)
class DmpState:
    Q: np.ndarray
    omega: np.ndarray
    omegadot: np.ndarray
    Qg: np.ndarray
    canonical: CanonicalState = field(default_factory=CanonicalState)

    @classmethod
    def initial(cls, params: DmpParams, Q=None, omega=None, Qg=None) -> "DmpState":
        return cls(
            Q=params.start.copy() if Q is None else quat.check_unit(Q),
            omega=np.zeros(3) if omega is None else np.asarray(omega, dtype=float),
            omegadot=np.zeros(3),
            Qg=params.goal.copy() if Qg is None else quat.check_unit(Qg),
        )


@dataclass
class Rollout:
    """Time-indexed orientation trajectory with optional sensors and costs."""

    times: np.ndarray
    Q: np.ndarray
    omega: np.ndarray
    omegadot: np.ndarray
    phase: Optional[np.ndarray] = None
    sensors: Optional[np.ndarray] = None
    costs: Optional[np.ndarray] = None
    tau: Optional[float] = None
    coupling: Optional[np.ndarray] = None
    ds: Optional[np.ndarray] = None
    valid: bool = True

    def __post_init__(self):
        T = len(self.times)
        for name in ("Q", "omega", "omegadot", "phase", "sensors", "costs", "coupling", "ds"):
            v = getattr(self, name)
            if v is not None and len(v) != T:
                raise ValueError(f"{name} has length {len(v)}, expected {T}")
        if T < 2 and self.valid:
            raise ValueError("a rollout needs at least two samples")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def duration_tau(self) -> float:
        """tau of this rollout, inferred from its length when not recorded."""
        if self.tau is not None:
            return float(self.tau)
        return float(self.times[-1] - self.times[0]) / HORIZON

    def cost_norm(self) -> float:
        return float(np.linalg.norm(self.costs))


# ---------------------------------------------------------------------------
# forcing term and transformation system
# ---------------------------------------------------------------------------


def forcing_term(params: DmpParams, p, u, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """``theta^T (psi / sum psi) u``; broadcasts over leading phase axes."""
    w = params.weights if weights is None else weights
    return phase_modulation(params.bank, p, u) @ w


def _accel(Q, omega, Qg, tau, f, c):
    spring = quat.rotvec_between(Qg, Q)
    return (ALPHA_W * (BETA_W * spring - tau * omega) + f + c) / tau**2


def _goal_step(Qg, goal, tau, dt):
    omega_g = ALPHA_G * quat.rotvec_between(goal, Qg) / tau
    return quat.integrate(Qg, omega_g, dt)


def transformation_step(
    state: DmpState, params: DmpParams, f, c, dt: float
) -> DmpState:
    """Advance orientation, goal and phase by one Euler step.

    The angular acceleration of the returned state is the one evaluated at the
    new state's predecessor, i.e. the value that produced the step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    quat.check_unit(state.Q)
    quat.check_unit(state.Qg)
    f = np.broadcast_to(np.asarray(f, dtype=float), (3,))
    c = np.broadcast_to(np.asarray(c, dtype=float), (3,))
    omegadot = _accel(state.Q, state.omega, state.Qg, params.tau, f, c)
    omega = state.omega + omegadot * dt
    Q = quat.integrate(state.Q, omega, dt)
    Qg = _goal_step(state.Qg, params.goal, params.tau, dt)
    return DmpState(Q=Q, omega=omega, omegadot=omegadot, Qg=Qg,
                    canonical=canonical_step(state.canonical, params.tau, dt))


def goal_trajectory(goal: np.ndarray, tau: float, dt: float, n_steps: int, Qg0=None) -> np.ndarray:
    Qg = np.empty((n_steps, 4))
    g = goal.copy() if Qg0 is None else np.asarray(Qg0, dtype=float)
    for t in range(n_steps):
        Qg[t] = g
        g = _goal_step(g, goal, tau, dt)
    return Qg


CouplingSource = Optional[Callable[[int, np.ndarray, float, float], np.ndarray]]


def simulate(
    params: DmpParams,
    dt: Optional[float] = None,
    n_steps: Optional[int] = None,
    coupling=None,
    weights: Optional[np.ndarray] = None,
    Q0=None,
    omega0=None,
    Qg0=None,
) -> Rollout:
    """Open-loop unroll of one primitive.

    ``coupling`` may be ``None``, a constant 3-vector, a ``(T, 3)`` array or a
    callable ``(t, Q, p, u) -> 3-vector``.
    """
    dt, default_n = horizon_steps(params.tau, dt)
    n_steps = default_n if n_steps is None else n_steps
    phase = canonical_trajectory(params.tau, dt, n_steps)
    f_all = forcing_term(params, phase[:, 0], phase[:, 1], weights)
    if coupling is None:
        c_of = lambda t, Q: 0.0
    elif callable(coupling):
        c_of = lambda t, Q: coupling(t, Q, phase[t, 0], phase[t, 1])
    else:
        carr = np.asarray(coupling, dtype=float)
        if carr.ndim == 1:
            c_of = lambda t, Q: carr
        else:
            c_of = lambda t, Q: carr[t]
    Q = params.start.copy() if Q0 is None else quat.check_unit(Q0)
    omega = np.zeros(3) if omega0 is None else np.asarray(omega0, dtype=float)
    Qg = params.goal.copy() if Qg0 is None else quat.check_unit(Qg0)
    out_Q = np.empty((n_steps, 4))
    out_w = np.empty((n_steps, 3))
    out_wd = np.empty((n_steps, 3))
    out_c = np.zeros((n_steps, 3))
    for t in range(n_steps):
        c = np.broadcast_to(np.asarray(c_of(t, Q), dtype=float), (3,))
        wd = _accel(Q, omega, Qg, params.tau, f_all[t], c)
        out_Q[t], out_w[t], out_wd[t], out_c[t] = Q, omega, wd, c
        omega = omega + wd * dt
        Q = quat.integrate(Q, omega, dt)
        Qg = _goal_step(Qg, params.goal, params.tau, dt)
    return Rollout(
        times=np.arange(n_steps) * dt, Q=out_Q, omega=out_w, omegadot=out_wd,
        phase=phase, tau=params.tau, coupling=out_c,
    )


# ---------------------------------------------------------------------------
# demonstrations -> parameters
# ---------------------------------------------------------------------------


def differentiate_orientation(times: np.ndarray, Q: np.ndarray, smooth: int = 5):
    """Angular velocity and acceleration of a sampled orientation trajectory.

    ``omega_t = 2 log(Q_{t+1} o Q_{t-1}*) / (t_{t+1} - t_{t-1})``, one-sided at
    the ends; the acceleration is the central difference of omega after a
    ``smooth``-sample moving average.
    """
    times = np.asarray(times, dtype=float)
    Q = quat.canonicalize(quat.check_unit(Q))
    if len(times) < 2:
        raise ValueError("need at least two samples to differentiate")
    dt = np.diff(times)
    omega = np.empty((len(times), 3))
    omega[1:-1] = quat.rotvec_between(Q[2:], Q[:-2]) / (times[2:] - times[:-2])[:, None]
    omega[0] = quat.rotvec_between(Q[1], Q[0]) / dt[0]
    omega[-1] = quat.rotvec_between(Q[-1], Q[-2]) / dt[-1]
    if smooth > 1:
        kernel = np.ones(smooth) / smooth
        pad = smooth // 2
        padded = np.pad(omega, ((pad, pad), (0, 0)), mode="edge")
        omega_s = np.stack([np.convolve(padded[:, i], kernel, mode="valid") for i in range(3)], axis=1)
    else:
        omega_s = omega
    omegadot = np.gradient(omega_s, times, axis=0)
    return omega, omegadot


def mean_quaternion(Qs: np.ndarray) -> np.ndarray:
    Qs = quat.canonicalize(np.atleast_2d(Qs))
    ref = Qs[0]
    signs = np.where(Qs @ ref < 0, -1.0, 1.0)
    return quat.normalize((Qs * signs[:, None]).sum(axis=0))


def _demo_phase(demo: Rollout, tau: float) -> np.ndarray:
    return canonical_trajectory(tau, demo.dt, len(demo))


def _regress(features: np.ndarray, targets: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    if features.shape[0] < 2:
        raise RegressionError(f"need at least 2 samples, got {features.shape[0]}")
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
        raise RegressionError("non-finite regression data")
    if not np.any(features):
        raise RegressionError("all phase features are zero; demos carry no phase velocity")
    # The ridge is per row, so duplicating the data leaves the solution unchanged.
    gram = features.T @ features + ridge * features.shape[0] * np.eye(features.shape[1])
    try:
        return np.linalg.solve(gram, features.T @ targets)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(f"singular feature Gram matrix (cond={np.linalg.cond(gram):.3g})") from exc


def fit_forcing_term(
    demos: Sequence[Rollout],
    bank: Optional[KernelBank] = None,
    goal: Optional[np.ndarray] = None,
    ridge: float = RIDGE,
) -> DmpParams:
    """Least-squares forcing weights from one or more segmented demos.

    Start/goal are the mean first/last orientations (unless ``goal`` is
    given), tau the mean demo duration, and every sample of every demo
    contributes one regression row.
    """
    if len(demos) == 0:
        raise RegressionError("no demonstrations")
    bank = default_bank() if bank is None else bank
    start = mean_quaternion(np.array([d.Q[0] for d in demos]))
    goal = mean_quaternion(np.array([d.Q[-1] for d in demos])) if goal is None else quat.check_unit(goal)
    feats, targets, taus = [], [], []
    for d in demos:
        if len(d) < 2:
            raise RegressionError(f"demo with {len(d)} samples; need at least 2")
        tau = d.duration_tau
        taus.append(tau)
        phase = _demo_phase(d, tau)
        Qg = goal_trajectory(goal, tau, d.dt, len(d))
        spring = quat.rotvec_between(Qg, quat.check_unit(d.Q))
        f_target = -ALPHA_W * (BETA_W * spring - tau * d.omega) + tau**2 * d.omegadot
        feats.append(phase_modulation(bank, phase[:, 0], phase[:, 1]))
        targets.append(f_target)
    X = np.concatenate(feats)
    F = np.concatenate(targets)
    weights = _regress(X, F, ridge)
    return DmpParams(weights=weights, tau=float(np.mean(taus)), start=start, goal=goal, bank=bank)


def extract_target_coupling(demo: Rollout, nominal: DmpParams, phase: Optional[np.ndarray] = None) -> np.ndarray:
    """Target coupling of a corrected demo relative to a fitted nominal primitive."""
    tau = demo.duration_tau
    if phase is None:
        phase = _demo_phase(demo, tau)
    if len(phase) != len(demo):
        raise ValueError(f"phase length {len(phase)} does not match demo length {len(demo)}")
    Qg = goal_trajectory(nominal.goal, tau, demo.dt, len(demo))
    spring = quat.rotvec_between(Qg, quat.check_unit(demo.Q))
    f = forcing_term(nominal, phase[:, 0], phase[:, 1])
    return -ALPHA_W * (BETA_W * spring - tau * demo.omega) + tau**2 * demo.omegadot - f


# ---------------------------------------------------------------------------
# expected sensor traces (multi-channel linear DMP)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpectedSensorTraces:
    """One linear DMP per sensor channel, sharing the canonical system.

    ``weights`` is ``(N, S)``; ``start`` and ``goal`` are ``S``-vectors.
    """

    weights: np.ndarray
    tau: float
    start: np.ndarray
    goal: np.ndarray
    bank: KernelBank

    @property
    def n_channels(self) -> int:
        return self.weights.shape[1]

    def trajectory(self, n_steps: int, dt: Optional[float] = None) -> np.ndarray:
        dt = self.tau / STEPS_PER_TAU if dt is None else dt
        phase = canonical_trajectory(self.tau, dt, n_steps)
        f = phase_modulation(self.bank, phase[:, 0], phase[:, 1]) @ self.weights
        y = self.start.astype(float).copy()
        yd = np.zeros_like(y)
        out = np.empty((n_steps, self.n_channels))
        tau = self.tau
        for t in range(n_steps):
            out[t] = y
            ydd = (ALPHA_W * (BETA_W * (self.goal - y) - tau * yd) + f[t]) / tau**2
            yd = yd + ydd * dt
            y = y + yd * dt
        return out

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "tau": self.tau,
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "bank": self.bank.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpectedSensorTraces":
        return cls(
            weights=np.array(d["weights"], dtype=float),
            tau=float(d["tau"]),
            start=np.array(d["start"], dtype=float),
            goal=np.array(d["goal"], dtype=float),
            bank=KernelBank.from_dict(d["bank"]),
        )


def _trace_derivatives(y: np.ndarray, dt: float, window: int = 15):
    window = min(window, len(y) - (1 - len(y) % 2))
    if window >= 5:
        yd = savgol_filter(y, window, 3, deriv=1, delta=dt, axis=0, mode="interp")
        ydd = savgol_filter(y, window, 3, deriv=2, delta=dt, axis=0, mode="interp")
    else:
        yd = np.gradient(y, dt, axis=0)
        ydd = np.gradient(yd, dt, axis=0)
    return yd, ydd


def encode_sensor_traces(
    nominal_rollouts: Sequence[Rollout],
    bank: Optional[KernelBank] = None,
    ridge: float = RIDGE,
) -> ExpectedSensorTraces:
    if len(nominal_rollouts) == 0:
        raise RegressionError("no rollouts to encode")
    bank = default_bank() if bank is None else bank
    traces = [np.asarray(r.sensors, dtype=float) for r in nominal_rollouts]
    if any(t is None or t.ndim != 2 for t in traces):
        raise RegressionError("rollouts must carry (T, S) sensor traces")
    start = np.mean([t[0] for t in traces], axis=0)
    goal = np.mean([t[-1] for t in traces], axis=0)
    feats, targets, taus = [], [], []
    for r, y in zip(nominal_rollouts, traces):
        tau = r.duration_tau
        taus.append(tau)
        yd, ydd = _trace_derivatives(y, r.dt)
        phase = _demo_phase(r, tau)
        targets.append(tau**2 * ydd - ALPHA_W * (BETA_W * (goal - y) - tau * yd))
        feats.append(phase_modulation(bank, phase[:, 0], phase[:, 1]))
    weights = _regress(np.concatenate(feats), np.concatenate(targets), ridge)
    return ExpectedSensorTraces(weights=weights, tau=float(np.mean(taus)), start=start, goal=goal, bank=bank)


# ---------------------------------------------------------------------------
# closed-loop unroll against a plant
# ---------------------------------------------------------------------------


def _feedback_fn(fb):
    if fb is None:
        return None
    if callable(fb):
        return fb
    from .pmnn import PmnnParams, pmnn_forward

    if isinstance(fb, PmnnParams):
        return lambda ds, p, u: pmnn_forward(fb, ds, p, u)
    raise TypeError(f"unsupported feedback model {type(fb).__name__}")


def unroll(
    nominal: DmpParams,
    fb,
    expected: Optional[ExpectedSensorTraces],
    plant,
    extra_weights: Optional[np.ndarray] = None,
    coupling_axes: Sequence[int] = (0,),
    Q0=None,
) -> Rollout:
    """Closed-loop execution of one primitive on a plant.

    Each step queries ``plant.observe(Q, t) -> (s_actual, Q_cr)`` and
    ``plant.step_cost(Q_cr, t)``. The feedback model (a ``PmnnParams`` or a
    callable ``(ds, p, u) -> c``) maps the sensor deviation to coupling on
    ``coupling_axes``. ``extra_weights`` replaces the forcing weights; Alg.-2
    style exploration passes it together with ``fb=None``.
    """
    if fb is not None and extra_weights is not None:
        raise ValueError("use either a feedback model or replacement weights, not both")
    n_steps = plant.n_steps
    dt = plant.dt
    phase = canonical_trajectory(nominal.tau, dt, n_steps)
    f_all = forcing_term(nominal, phase[:, 0], phase[:, 1], extra_weights)
    s_exp = expected.trajectory(n_steps, dt) if expected is not None else None
    fb_fn = _feedback_fn(fb)
    axes = list(coupling_axes)

    Q = nominal.start.copy() if Q0 is None else quat.check_unit(Q0)
    omega = np.zeros(3)
    Qg = nominal.goal.copy()
    S = plant.n_sensors
    out_Q = np.zeros((n_steps, 4))
    out_w = np.zeros((n_steps, 3))
    out_wd = np.zeros((n_steps, 3))
    out_s = np.zeros((n_steps, S))
    out_ds = np.zeros((n_steps, S))
    out_J = np.zeros(n_steps)
    out_c = np.zeros((n_steps, 3))
    valid = True
    t_done = n_steps
    for t in range(n_steps):
        try:
            s_act, Q_cr = plant.observe(Q, t)
            J = plant.step_cost(Q_cr, t)
        except PlantError as exc:
            log.warning("plant failed at step %d: %s", t, exc)
            valid = False
            t_done = t
            break
        ds = s_act - s_exp[t] if s_exp is not None else np.zeros(S)
        c = np.zeros(3)
        if fb_fn is not None:
            c[axes] = fb_fn(ds, phase[t, 0], phase[t, 1])
        wd = _accel(Q, omega, Qg, nominal.tau, f_all[t], c)
        out_Q[t], out_w[t], out_wd[t] = Q, omega, wd
        out_s[t], out_ds[t], out_J[t], out_c[t] = s_act, ds, J, c
        omega = omega + wd * dt
        Q = quat.integrate(Q, omega, dt)
        Qg = _goal_step(Qg, nominal.goal, nominal.tau, dt)
    sl = slice(0, t_done)
    return Rollout(
        times=np.arange(t_done) * dt, Q=out_Q[sl], omega=out_w[sl], omegadot=out_wd[sl],
        phase=phase[sl], sensors=out_s[sl], costs=out_J[sl], tau=nominal.tau,
        coupling=out_c[sl], ds=out_ds[sl], valid=valid,
    )


def with_weights(params: DmpParams, weights: np.ndarray) -> DmpParams:
    return replace(params, weights=np.asarray(weights, dtype=float))
