"""Second-order canonical system and the phase kernel bank it drives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHA_U = 25.0
BETA_U = ALPHA_U / 4.0

DEFAULT_N_KERNELS = 25
# Kernel centres are sampled at equal times over this many movement durations.
CENTER_SPAN = 1.5
WIDTH_OVERLAP = 0.55
STEPS_PER_TAU = 300


@dataclass(frozen=True)
class CanonicalState:
    p: float = 1.0
    u: float = 0.0

    @property
    def up(self) -> float:
        """tau * du/dt at this state."""
        return ALPHA_U * (BETA_U * (0.0 - self.p) - self.u)


def _check_step(tau: float, dt: float) -> None:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")


def canonical_step(s: CanonicalState, tau: float, dt: float) -> CanonicalState:
    """Explicit Euler step of ``tau u' = a(b(0 - p) - u)``, ``tau p' = u``."""
    _check_step(tau, dt)
    udot = s.up / tau
    pdot = s.u / tau
    return CanonicalState(p=s.p + pdot * dt, u=s.u + udot * dt)


def canonical_trajectory(tau: float, dt: float, n_steps: int) -> np.ndarray:
    """Phase ``(p, u)`` at steps ``0 .. n_steps-1``; shape ``(n_steps, 2)``.

    Bit-identical to iterating :func:`canonical_step`.
    """
    _check_step(tau, dt)
    out = np.empty((n_steps, 2))
    p, u = 1.0, 0.0
    for t in range(n_steps):
        out[t, 0] = p
        out[t, 1] = u
        udot = ALPHA_U * (BETA_U * (0.0 - p) - u) / tau
        pdot = u / tau
        p, u = p + pdot * dt, u + udot * dt
    return out


@dataclass(frozen=True)
class KernelBank:
    centers: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        widths = np.asarray(self.widths, dtype=float)
        if centers.ndim != 1 or centers.shape != widths.shape:
            raise ValueError("centers and widths must be 1-D arrays of equal length")
        if np.any(widths <= 0) or not np.all(np.isfinite(widths)):
            raise ValueError("kernel widths must be finite and positive")
        centers.setflags(write=False)
        widths.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "widths", widths)

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    def to_dict(self) -> dict:
        return {"n": self.n, "centers": self.centers.tolist(), "widths": self.widths.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelBank":
        bank = cls(np.array(d["centers"]), np.array(d["widths"]))
        if "n" in d and int(d["n"]) != bank.n:
            raise ValueError("kernel count does not match centres")
        return bank


def default_bank(n: int = DEFAULT_N_KERNELS) -> KernelBank:
    """Kernels equally spaced in time over ``[0, 1.5 tau]``.

    The phase trajectory is a function of ``t / tau`` only, so the bank does
    not depend on tau. Widths follow ``1 / (2 (0.55 dmu)^2)`` with ``dmu`` the
    gap to the next centre; the last kernel reuses its neighbour's width.
    """
    if n < 2:
        raise ValueError("need at least two kernels")
    n_steps = int(round(CENTER_SPAN * STEPS_PER_TAU)) + 1
    traj = canonical_trajectory(1.0, 1.0 / STEPS_PER_TAU, n_steps)
    t_grid = np.arange(n_steps) / STEPS_PER_TAU
    t_centers = np.linspace(0.0, CENTER_SPAN, n)
    centers = np.interp(t_centers, t_grid, traj[:, 0])
    gaps = np.abs(np.diff(centers))
    gaps = np.append(gaps, gaps[-1])
    widths = 1.0 / (2.0 * (WIDTH_OVERLAP * gaps) ** 2)
    return KernelBank(centers, widths)


def kernels(bank: KernelBank, p) -> np.ndarray:
    """Gaussian activations ``exp(-chi_i (p - mu_i)^2)``; shape ``(..., N)``."""
    p = np.asarray(p, dtype=float)[..., None]
    return np.exp(-bank.widths * (p - bank.centers) ** 2)


def normalized_kernels(bank: KernelBank, p) -> np.ndarray:
    """``psi_i / sum_j psi_j`` evaluated in log space.

    Far from every centre the raw activations can all underflow, so the
    normalization subtracts the largest exponent first.
    """
    p = np.asarray(p, dtype=float)[..., None]
    logits = -bank.widths * (p - bank.centers) ** 2
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def phase_modulation(bank: KernelBank, p, u) -> np.ndarray:
    """Phase kernel modulation vector ``Phi`` with ``sum(Phi) == u``."""
    u = np.asarray(u, dtype=float)[..., None]
    return normalized_kernels(bank, p) * u
