"""Simulated tilt-board scraping plant and synthetic demonstration corpora.

The plant stands in for the robot, the tactile sensors and the motion
capture. For one primitive and one board tilt it precomputes

* the nominal trajectory ``Q_nom`` (the primitive unrolled without coupling),
* the ideal corrected trajectory ``Q_ideal`` (the primitive unrolled with an
  oracle roll coupling ``k * tilt * u``, which vanishes with the phase
  velocity like any learned coupling does),
* the board rotation ``Q_board,t = Q_ideal,t o Q_nom,t*`` the tool has to
  follow at each step.

Observing a commanded orientation returns the tool orientation relative to
the board, ``Q_cr = Q_board* o Q_cmd``; the step cost compares it with the
nominal orientation, so the oracle behavior has zero cost. The sensors read
the board's roll through a fixed random mixing matrix on top of a base trace,
so the sensor deviation tells how much correction the current setting needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import quat
from .canonical import canonical_trajectory
from .dmp import DmpParams, ExpectedSensorTraces, Rollout, horizon_steps, simulate, unroll
from .segmentation import Demo1D

SETTING_LABELS = {
    0.0: "default",
    2.5: "unseen",
    5.0: "seen",
    6.3: "seen",
    7.5: "seen",
    8.8: "unseen",
    10.0: "initially-unseen",
}
SEEN = (5.0, 6.3, 7.5)
RL_SETTING = 10.0
GENERALIZATION_SETTING = 8.8
DEFAULT_SENSORS = 38
ROLL = 0


@dataclass(frozen=True)
class EnvSetting:
    roll_deg: float
    label: str = ""

    def __post_init__(self):
        if not self.label:
            object.__setattr__(self, "label", SETTING_LABELS.get(round(float(self.roll_deg), 1), "unseen"))

    @property
    def roll_rad(self) -> float:
        return float(np.deg2rad(self.roll_deg))


def canonical_settings() -> list:
    return [EnvSetting(d) for d in sorted(SETTING_LABELS)]


@dataclass
class PlantConfig:
    n_sensors: int = DEFAULT_SENSORS
    sensor_noise: float = 0.01
    orientation_noise: float = 1e-3  # rad, per axis of the measured relative orientation
    mixing_scale: float = 3.0
    saturation: Optional[float] = None  # per-channel tanh squashing level; None keeps the model linear
    base_trace_scale: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PlantConfig":
        return cls(**d)


def _oracle_gain(nominal: DmpParams, dt: float, n_steps: int) -> float:
    """Coupling gain ``k`` that makes the board's peak roll equal the tilt."""
    probe = np.deg2rad(1.0)
    phase = canonical_trajectory(nominal.tau, dt, n_steps)
    c = np.zeros((n_steps, 3))
    c[:, ROLL] = probe * phase[:, 1]
    nom = simulate(nominal, dt, n_steps)
    cor = simulate(nominal, dt, n_steps, coupling=c)
    board = quat.rotvec_between(cor.Q, nom.Q)
    peak = float(np.max(np.abs(board[:, ROLL])))
    if peak <= 0:
        raise ValueError("primitive does not respond to roll coupling")
    return probe / peak


@dataclass
class PlantHandle:
    """One primitive on one board setting.

    Build with :meth:`create`; ``reseed`` restarts the noise stream so that
    repeated evaluations are reproducible.
    """

    setting: EnvSetting
    nominal: DmpParams
    config: PlantConfig
    G: np.ndarray
    base: np.ndarray  # (T, S) sensor trace at zero tilt
    Q_nr: np.ndarray  # (T, 4) nominal orientation reference
    Q_board: np.ndarray  # (T, 4)
    board_roll: np.ndarray  # (T,)
    gain: float
    dt: float
    active: bool = True
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def create(
        cls,
        setting: EnvSetting,
        nominal: DmpParams,
        config: Optional[PlantConfig] = None,
        base_traces: Optional[ExpectedSensorTraces] = None,
        active: bool = True,
        noise_seed: int = 0,
    ) -> "PlantHandle":
        """``active=False`` models a primitive the tilt does not affect."""
        cfg = PlantConfig() if config is None else config
        dt, n_steps = horizon_steps(nominal.tau)
        mix_rng = np.random.default_rng(cfg.seed)
        G = cfg.mixing_scale * mix_rng.standard_normal((cfg.n_sensors, 3))
        if base_traces is None:
            base_traces = random_sensor_traces(nominal, cfg.n_sensors, cfg.base_trace_scale, mix_rng)
        base = base_traces.trajectory(n_steps, dt)
        nom = simulate(nominal, dt, n_steps)
        gain = _oracle_gain(nominal, dt, n_steps) if active else 0.0
        if active and setting.roll_deg != 0.0:
            phase = canonical_trajectory(nominal.tau, dt, n_steps)
            c = np.zeros((n_steps, 3))
            c[:, ROLL] = gain * setting.roll_rad * phase[:, 1]
            ideal = simulate(nominal, dt, n_steps, coupling=c).Q
        else:
            ideal = nom.Q
        Q_board = quat.canonicalize(quat.compose(ideal, quat.conjugate(nom.Q)))
        board_roll = quat.rotvec_between(ideal, nom.Q)[:, ROLL]
        return cls(
            setting=setting,
            nominal=nominal,
            config=cfg,
            G=G,
            base=base,
            Q_nr=nom.Q,
            Q_board=Q_board,
            board_roll=board_roll,
            gain=gain,
            dt=dt,
            active=active,
            rng=np.random.default_rng(noise_seed),
        )

    @property
    def n_steps(self) -> int:
        return len(self.Q_nr)

    @property
    def n_sensors(self) -> int:
        return self.G.shape[0]

    def reseed(self, seed) -> "PlantHandle":
        self.rng = np.random.default_rng(seed)
        return self

    def sensor_shift(self, t: int) -> np.ndarray:
        x = self.G[:, ROLL] * self.board_roll[t]
        sat = self.config.saturation
        return x if sat is None else sat * np.tanh(x / sat)

    def oracle_coupling(self, u: float) -> float:
        return self.gain * self.setting.roll_rad * u

    def observe(self, Q_cmd: np.ndarray, t: int):
        cfg = self.config
        s = self.base[t] + self.sensor_shift(t)
        if cfg.sensor_noise > 0:
            s = s + cfg.sensor_noise * self.rng.standard_normal(self.n_sensors)
        Q_cr = quat.compose(quat.conjugate(self.Q_board[t], check=False), Q_cmd, check=False)
        if cfg.orientation_noise > 0:
            jitter = quat.quat_exp(0.5 * cfg.orientation_noise * self.rng.standard_normal(3))
            Q_cr = quat.compose(jitter, Q_cr, check=False)
        return s, quat.normalize(Q_cr)

    def step_cost(self, Q_cr: np.ndarray, t: int) -> float:
        rel = quat.compose(self.Q_nr[t], quat.conjugate(Q_cr, check=False), check=False)
        return float(np.linalg.norm(2.0 * quat.quat_log(quat.canonicalize(rel), check=False)))


def plant_observe(plant: PlantHandle, Q_cmd: np.ndarray, t: int):
    return plant.observe(Q_cmd, t)


def random_sensor_traces(
    nominal: DmpParams, n_sensors: int, scale: float, rng: np.random.Generator
) -> ExpectedSensorTraces:
    """Smooth base traces drawn from random linear DMPs (exactly encodable)."""
    N = nominal.bank.n
    start = scale * rng.standard_normal(n_sensors)
    goal = start + 0.5 * scale * rng.standard_normal(n_sensors)
    weights = 200.0 * scale * rng.standard_normal((N, n_sensors))
    return ExpectedSensorTraces(weights=weights, tau=nominal.tau, start=start, goal=goal, bank=nominal.bank)


def _oracle_fb(plant: PlantHandle, gain_scale: float = 1.0):
    def fb(ds, p, u):
        return np.array([gain_scale * plant.oracle_coupling(u)])

    return fb


def generate_corrected_demos(
    plant: PlantHandle,
    nominal: DmpParams,
    n: int = 15,
    seed: int = 0,
    expected: Optional[ExpectedSensorTraces] = None,
    gain_jitter: float = 0.05,
) -> list:
    """Corrective demonstrations: the nominal unrolled with the oracle roll
    coupling, each demo with its own gain error and sensor/motion noise."""
    if n <= 0:
        return []
    children = np.random.SeedSequence([seed, int(round(plant.setting.roll_deg * 10))]).spawn(n)
    demos = []
    for child in children:
        rng = np.random.default_rng(child)
        scale = 1.0 + gain_jitter * rng.standard_normal()
        plant.reseed(rng.integers(2**63))
        demos.append(unroll(nominal, _oracle_fb(plant, scale), expected, plant, coupling_axes=(ROLL,)))
    return demos


@dataclass
class SettingEval:
    setting: EnvSetting
    mean: float
    std: float
    cost_norms: list


def evaluate_setting(
    plant: PlantHandle,
    nominal: DmpParams,
    fb=None,
    runs: int = 8,
    expected: Optional[ExpectedSensorTraces] = None,
    seed: int = 0,
) -> SettingEval:
    """Mean and standard deviation of the cost norm over ``runs`` noisy unrolls."""
    if runs < 1:
        raise ValueError("need at least one run")
    norms = []
    for r in range(runs):
        plant.reseed([seed, r, int(round(plant.setting.roll_deg * 10))])
        roll = unroll(nominal, fb, expected, plant, coupling_axes=(ROLL,))
        norms.append(roll.cost_norm())
    return SettingEval(plant.setting, float(np.mean(norms)), float(np.std(norms)), norms)


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


def minimum_jerk(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x**3 * (10.0 - 15.0 * x + 6.0 * x**2)


def alignment_signal(i: np.ndarray, onset: float, length: float, amp: float, wiggle: float) -> np.ndarray:
    """Resting level, a minimum-jerk transition with a bump, resting level."""
    x = (np.asarray(i, dtype=float) - onset) / length
    s = minimum_jerk(x)
    bump = wiggle * np.sin(2.0 * np.pi * 1.2 * np.clip(x, 0.0, 1.0)) * 16.0 * s * (1.0 - s)
    return amp * (1.0 - s) + amp * bump


@dataclass
class AlignmentCase:
    ref: Demo1D
    guess: Demo1D
    ref_span: tuple
    a: float
    b: float  # guess index j = a * i + b for reference index i


def alignment_case(
    a: float,
    b: float,
    rng: np.random.Generator,
    noise: float = 0.01,
    rate: float = 300.0,
    h: float = 0.1,
    trailing_plateau: int = 0,
) -> AlignmentCase:
    """A reference demo and a time-scaled, delayed copy, both with noise.

    ``noise`` is relative to the signal range. The reference span comes from
    ZVC on the reference; ``trailing_plateau`` extends its end by that many
    resting samples, as a sloppy manual cut would.
    """
    from .segmentation import zvc_segment

    n = 720
    onset = rng.uniform(110, 140)
    length = rng.uniform(280, 320)
    amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.25, 0.35)
    wiggle = rng.uniform(0.1, 0.25)
    sigma = noise * abs(amp)
    i = np.arange(n)
    ref = Demo1D.from_positions(alignment_signal(i, onset, length, amp, wiggle) + sigma * rng.standard_normal(n), rate, "ref")
    j = np.arange(int(np.ceil(n * 1.6)))
    z = alignment_signal((j - b) / a, onset, length, amp, wiggle) + sigma * rng.standard_normal(len(j))
    guess = Demo1D.from_positions(z, rate, "guess")
    s1, e1 = zvc_segment(ref, h)
    return AlignmentCase(ref, guess, (s1, min(e1 + trailing_plateau, n - 1)), float(a), float(b))


@dataclass
class DemoRecord:
    """One raw demonstration: positions, orientations and timing truth."""

    name: str
    rate: float
    pos: np.ndarray  # (T, 3)
    Q: np.ndarray  # (T, 4)
    spans: list  # true (start, end) sample of each primitive

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.pos)) / self.rate

    def axis(self, name: str, smooth: float = 0.1) -> Demo1D:
        k = "xyz".index(name)
        return Demo1D.from_positions(self.pos[:, k], self.rate, f"{self.name}:{name}", smooth)


# Scripted orientation waypoints: primitive 2 reorients the tool, primitive 3
# pitches slightly while scraping forward.
_Q_A = quat.from_axis_angle([0.0, 1.0, 0.0], np.deg2rad(-10.0))
_Q_B = quat.compose(quat.from_axis_angle([1.0, 0.0, 0.0], np.deg2rad(20.0)), quat.from_axis_angle([0.0, 1.0, 0.0], np.deg2rad(15.0)))
_Q_C = quat.compose(quat.from_axis_angle([0.0, 1.0, 0.0], np.deg2rad(10.0)), _Q_B)
PRIMITIVE_SECONDS = (1.0, 1.2, 1.5)
REST_SECONDS = (0.5, 0.35, 0.35, 0.6)


def _slerp_profile(Qa: np.ndarray, Qb: np.ndarray, s: np.ndarray) -> np.ndarray:
    w = quat.rotvec_between(Qb, Qa)
    return quat.compose(quat.quat_exp(0.5 * s[:, None] * w), np.broadcast_to(Qa, (len(s), 4)))


def make_demo(
    name: str,
    scales: Sequence[float],
    rests: Sequence[float],
    rng: np.random.Generator,
    rate: float = 300.0,
    noise: float = 0.01,
    orientation_noise: float = 5e-4,
) -> DemoRecord:
    """Descend along z, reorient, scrape along y; resting between primitives."""
    durs = [int(round(PRIMITIVE_SECONDS[p] * scales[p] * rate)) for p in range(3)]
    gaps = [int(round(r * rate)) for r in rests]
    T = sum(durs) + sum(gaps)
    t = np.arange(T)
    starts = []
    cur = gaps[0]
    for p in range(3):
        starts.append(cur)
        cur += durs[p] + gaps[p + 1]
    spans = [(starts[p], starts[p] + durs[p]) for p in range(3)]
    s = [minimum_jerk((t - spans[p][0]) / durs[p]) for p in range(3)]
    z = 0.30 - 0.18 * s[0]
    y = 0.25 * s[2] + 0.01 * np.sin(np.pi * s[2])
    x = 0.40 + 0.005 * np.sin(np.pi * s[1])
    pos = np.column_stack([x, y, z])
    pos = pos + noise * np.array([0.01, 0.25, 0.18]) * rng.standard_normal(pos.shape)
    Q = _slerp_profile(_Q_A, _Q_B, s[1])
    Q = quat.compose(_slerp_profile(quat.IDENTITY, quat.compose(_Q_C, quat.conjugate(_Q_B)), s[2]), Q)
    if orientation_noise > 0:
        Q = quat.compose(quat.quat_exp(0.5 * orientation_noise * rng.standard_normal((T, 3))), Q)
    return DemoRecord(name, rate, pos, quat.canonicalize(quat.normalize(Q)), spans)


def make_demo_corpus(L: int = 11, seed: int = 0, rate: float = 300.0, noise: float = 0.01) -> list:
    """``L`` nominal demos with per-demo time scales and rest lengths.

    Demo 0 runs at nominal speed and serves as the reference.
    """
    rng = np.random.default_rng(seed)
    demos = []
    for l in range(L):
        if l == 0:
            scales, rests = (1.0, 1.0, 1.0), REST_SECONDS
        else:
            scales = tuple(rng.uniform(0.85, 1.2, size=3))
            rests = tuple(r * rng.uniform(0.8, 1.3) for r in REST_SECONDS)
        demos.append(make_demo(f"demo{l:02d}", scales, rests, rng, rate, noise))
    return demos


def segment_rollout(demo: DemoRecord, span: tuple) -> Rollout:
    """Orientation segment ``[start, end]`` as a rollout for DMP fitting."""
    from .dmp import differentiate_orientation

    s, e = span
    Q = demo.Q[s:e + 1]
    times = np.arange(len(Q)) / demo.rate
    omega, omegadot = differentiate_orientation(times, Q)
    return Rollout(times=times, Q=Q, omega=omega, omegadot=omegadot, tau=float(times[-1]))
