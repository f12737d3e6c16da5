"""Unit-quaternion algebra on SO(3).

Quaternions are plain numpy arrays laid out as ``[r, q1, q2, q3]`` (scalar
part first). Every function broadcasts over leading axes, so a trajectory of
``T`` orientations is simply an array of shape ``(T, 4)``.

The log/exp pair uses the half-angle convention: ``quat_exp(w)`` is a rotation
by ``2 * |w|`` about ``w``, hence ``2 * quat_log(Qa o Qb*)`` is the rotation
vector taking ``Qb`` to ``Qa``.
"""

from __future__ import annotations

import numpy as np

NORM_TOL = 1e-6
SMALL_ANGLE = 1e-8

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _norm(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    # what np.linalg.norm computes along the last axis, without its dispatch cost
    return np.sqrt(np.add.reduce(x * x, axis=-1, keepdims=keepdims))


class QuaternionError(ValueError):
    """Raised for quaternions that are not unit-norm (or not finite)."""


def check_unit(Q: np.ndarray, tol: float = NORM_TOL) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.shape[-1] != 4:
        raise QuaternionError(f"expected trailing dimension 4, got shape {Q.shape}")
    norms = _norm(Q)
    if not np.all(np.isfinite(norms)) or np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.max(np.abs(norms - 1.0))) if np.all(np.isfinite(norms)) else np.nan
        raise QuaternionError(f"quaternion is not unit-norm (deviation {worst:.3g})")
    return Q


def normalize(Q: np.ndarray) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    return Q / _norm(Q, keepdims=True)


def canonicalize(Q: np.ndarray) -> np.ndarray:
    """Pick the representative with non-negative scalar part."""
    Q = np.asarray(Q, dtype=float)
    sign = np.where(Q[..., :1] < 0.0, -1.0, 1.0)
    return Q * sign


def compose(a: np.ndarray, b: np.ndarray, check: bool = True) -> np.ndarray:
    """Hamilton product ``a o b``."""
    if check:
        a = check_unit(a)
        b = check_unit(b)
    else:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
    if a.ndim == 1 and b.ndim == 1:
        # same operations in the same order on Python floats, much less overhead
        ra, qa1, qa2, qa3 = a.tolist()
        rb, qb1, qb2, qb3 = b.tolist()
        return np.array(
            [
                ra * rb - qa1 * qb1 - qa2 * qb2 - qa3 * qb3,
                qa1 * rb + ra * qb1 - qa3 * qb2 + qa2 * qb3,
                qa2 * rb + qa3 * qb1 + ra * qb2 - qa1 * qb3,
                qa3 * rb - qa2 * qb1 + qa1 * qb2 + ra * qb3,
            ]
        )
    ra, qa1, qa2, qa3 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    rb, qb1, qb2, qb3 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = ra * rb - qa1 * qb1 - qa2 * qb2 - qa3 * qb3
    out[..., 1] = qa1 * rb + ra * qb1 - qa3 * qb2 + qa2 * qb3
    out[..., 2] = qa2 * rb + qa3 * qb1 + ra * qb2 - qa1 * qb3
    out[..., 3] = qa3 * rb - qa2 * qb1 + qa1 * qb2 + ra * qb3
    return out


def conjugate(a: np.ndarray, check: bool = True) -> np.ndarray:
    if check:
        a = check_unit(a)
    out = np.array(a, dtype=float, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_log(a: np.ndarray, check: bool = True) -> np.ndarray:
    """Logarithm map SO(3) -> so(3).

    Returns ``arccos(r) / sin(arccos(r)) * q``. The angle is evaluated as
    ``atan2(|q|, r)``, which equals ``arccos(r)`` on the unit sphere but keeps
    full precision near the identity. Inside ``|q| < 1e-8`` the analytic limit
    (the zero vector) is returned.
    """
    if check:
        a = check_unit(a)
    a = np.asarray(a, dtype=float)
    r = np.clip(a[..., 0], -1.0, 1.0)
    q = a[..., 1:]
    qn = _norm(q)
    small = qn < SMALL_ANGLE
    angle = np.arctan2(qn, r)
    scale = np.where(small, 0.0, angle / np.where(small, 1.0, qn))
    return scale[..., None] * q


def quat_exp(w: np.ndarray) -> np.ndarray:
    """Exponential map so(3) -> SO(3): ``[cos|w|, sin|w|/|w| * w]``."""
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("rotation vector must be finite")
    n = _norm(w)
    small = n < SMALL_ANGLE
    safe = np.where(small, 1.0, n)
    r = np.where(small, 1.0, np.cos(n))
    s = np.where(small, 0.0, np.sin(n) / safe)
    out = np.empty(w.shape[:-1] + (4,))
    out[..., 0] = r
    out[..., 1:] = s[..., None] * w
    return out


def rotvec_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``2 log(a o b*)`` along the shorter arc.

    The product is canonicalized first, so the result has norm at most pi
    regardless of which cover ``a`` and ``b`` sit on.
    """
    rel = compose(a, conjugate(b, check=False), check=False)
    return 2.0 * quat_log(canonicalize(rel), check=False)


def from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return quat_exp(0.5 * angle * axis)


def integrate(Q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """One step of ``Q <- exp(omega dt / 2) o Q``, renormalized onto r >= 0."""
    Q_next = compose(quat_exp(0.5 * dt * np.asarray(omega, dtype=float)), Q, check=False)
    return canonicalize(normalize(Q_next))


def random_unit(rng: np.random.Generator, size=None) -> np.ndarray:
    shape = (4,) if size is None else tuple(np.atleast_1d(size)) + (4,)
    return normalize(rng.standard_normal(shape))
