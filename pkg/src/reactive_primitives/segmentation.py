"""Semi-automated segmentation of multi-primitive demonstrations.

A reference demo is cut by hand (or ZVC); every other demo gets a rough ZVC
guess that is widened, aligned to the reference with DTW, and refined through
a velocity-weighted least-squares fit of a time scale ``a`` and delay ``b``.
Indices are 0-based throughout.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import savgol_filter

log = logging.getLogger(__name__)

DWELL_SECONDS = 0.1
NEAR_ZERO_FRACTION = 0.15
COND_LIMIT = 1e12
END_FRACTION = 0.5


class SegmentationError(ValueError):
    pass


class AlignmentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Demo1D:
    """One scalar axis of a demonstration and its velocity."""

    z: np.ndarray
    v: np.ndarray
    rate: float
    name: str = ""

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if z.shape != v.shape or z.ndim != 1:
            raise ValueError("z and v must be 1-D arrays of equal length")
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_positions(cls, z, rate: float, name: str = "", smooth: float = 0.1) -> "Demo1D":
        """Filtered position and velocity from raw samples.

        Both come from a quadratic Savitzky-Golay fit over ``smooth`` seconds;
        ``smooth=0`` keeps the raw signal and uses central differences.
        """
        z = np.asarray(z, dtype=float)
        window = int(round(smooth * rate)) | 1
        if window >= 5 and len(z) > window:
            v = savgol_filter(z, window, 2, deriv=1, delta=1.0 / rate, mode="nearest")
            z = savgol_filter(z, window, 2, mode="nearest")
        else:
            v = np.gradient(z) * rate
        return cls(z, v, rate, name)

    def __len__(self) -> int:
        return len(self.z)

    def segment(self, start: int, end: int) -> "Demo1D":
        """Inclusive slice ``[start, end]`` clamped to the signal."""
        start = max(int(start), 0)
        end = min(int(end), len(self) - 1)
        return Demo1D(self.z[start:end + 1], self.v[start:end + 1], self.rate, self.name)

    def downsample(self, g: int) -> "Demo1D":
        return Demo1D(self.z[::g], self.v[::g], self.rate / g, self.name)


@dataclass(frozen=True)
class CorrespondenceSet:
    pairs: np.ndarray  # (K, 2) of (t_ref, t_guess)
    weights: np.ndarray = None

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
        w = np.ones(len(pairs)) if self.weights is None else np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class AlignmentParams:
    a: float
    b: float


@dataclass
class DtwResult:
    pairs: CorrespondenceSet
    path: np.ndarray
    cost: float
    cells: int


def zvc_segment(
    demo: Demo1D, h: float, dwell: float = DWELL_SECONDS, start: int = 0, min_motion: Optional[float] = None
) -> tuple[int, int]:
    """First motion interval of ``demo`` by zero-velocity crossing.

    ``s`` is the first index (at or after ``start``) where ``|v|`` exceeds
    ``h``; ``e`` is the first later index where ``|v|`` drops below ``h`` and
    stays there for ``dwell`` seconds (or until the signal ends). Intervals
    shorter than ``min_motion`` seconds (default: ``dwell``) are treated as
    noise spikes and skipped.
    """
    if not h > 0:
        raise ValueError("threshold h must be positive")
    speed = np.abs(demo.v)
    n = len(speed)
    n_dwell = max(1, int(round(dwell * demo.rate)))
    n_min = n_dwell if min_motion is None else max(1, int(round(min_motion * demo.rate)))
    below = speed <= h
    pos = start
    while pos < n:
        above = np.flatnonzero(~below[pos:])
        if above.size == 0:
            break
        s = pos + int(above[0])
        e = _zvc_end(below, s, n_dwell)
        if e - s >= n_min or e == n - 1:
            return s, e
        pos = e
    raise SegmentationError(f"no zero-velocity crossing above h={h} in demo {demo.name!r}")


def _zvc_end(below: np.ndarray, s: int, n_dwell: int) -> int:
    n = len(below)
    i = s
    while i < n:
        if below[i]:
            j = i
            while j < n and below[j] and j - i < n_dwell:
                j += 1
            if j - i >= n_dwell or j == n:
                return i
            i = j
        else:
            i += 1
    return n - 1


def standardize(z: np.ndarray, mode: str = "endpoints", n_end: int = 15) -> np.ndarray:
    """Affine normalization of a segment before DTW.

    ``"zscore"`` gives zero mean and unit variance. Its statistics depend on
    how much resting signal the widened window holds, and a level mismatch
    between two windows shifts the whole warping path. ``"endpoints"`` (the
    default) maps the median resting level over the first ``n_end`` samples
    to 0 and over the last ``n_end`` to 1, which is invariant to the margins.
    It falls back to z-scoring when the two levels are within 10% of the
    signal range (for example a motion that returns to its start).
    """
    z = np.asarray(z, dtype=float)
    sd = z.std()
    if not sd > 1e-12:
        raise SegmentationError("cannot standardize a constant segment")
    if mode == "endpoints":
        k = max(1, min(n_end, len(z) // 4))
        lo, hi = np.median(z[:k]), np.median(z[-k:])
        if abs(hi - lo) > 0.1 * np.ptp(z):
            return (z - lo) / (hi - lo)
    elif mode != "zscore":
        raise ValueError(f"unknown normalization {mode!r}")
    return (z - z.mean()) / sd


def dtw(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Classic DTW with squared-difference cost and steps (1,0), (0,1), (1,1).

    Returns the warping path as an ``(L, 2)`` index array from ``(0, 0)`` to
    ``(N-1, M-1)``, the total cost and the number of evaluated cells.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = len(x), len(y)
    local = (x[:, None] - y[None, :]) ** 2
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    # Anti-diagonal sweep keeps the recursion vectorized.
    for d in range(2, n + m + 1):
        i_lo = max(1, d - m)
        i_hi = min(n, d - 1)
        i = np.arange(i_lo, i_hi + 1)
        j = d - i
        best = np.minimum(np.minimum(acc[i - 1, j - 1], acc[i - 1, j]), acc[i, j - 1])
        acc[i, j] = local[i - 1, j - 1] + best
    i, j = n, m
    path = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        steps = (acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
        k = int(np.argmin(steps))
        if k == 0:
            i, j = i - 1, j - 1
        elif k == 1:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    return np.array(path[::-1]), float(acc[n, m]), n * m


def path_to_pairs(path: np.ndarray, n_ref: int, n_guess: int) -> np.ndarray:
    """Reduce a warping path to ``min(N, M)`` one-to-one pairs.

    The shorter sequence is walked index by index; among the path cells that
    visit an index, the one closest to the path's overall diagonal is kept.
    """
    slope = (n_guess - 1) / max(n_ref - 1, 1)
    ref_short = n_ref <= n_guess
    key = path[:, 0] if ref_short else path[:, 1]
    pairs = []
    for k in range(n_ref if ref_short else n_guess):
        cells = path[key == k]
        dev = np.abs(cells[:, 1] - slope * cells[:, 0])
        pairs.append(cells[int(np.argmin(dev))])
    return np.array(pairs)


def dtw_correspondences(
    ref: Demo1D, guess: Demo1D, return_result: bool = False, norm: str = "endpoints", n_end: int = 15
):
    if len(ref) < 2 or len(guess) < 2:
        raise SegmentationError("DTW needs segments of length >= 2")
    path, cost, cells = dtw(standardize(ref.z, norm, n_end), standardize(guess.z, norm, n_end))
    pairs = CorrespondenceSet(path_to_pairs(path, len(ref), len(guess)))
    if return_result:
        return DtwResult(pairs, path, cost, cells)
    return pairs


def construct_ls(c: CorrespondenceSet) -> tuple[np.ndarray, np.ndarray]:
    if len(c) < 2:
        raise SegmentationError("need at least two correspondence pairs")
    A = np.column_stack([c.pairs[:, 0].astype(float), np.ones(len(c))])
    b = c.pairs[:, 1].astype(float)
    return A, b


def compute_ls_weights(
    c: CorrespondenceSet,
    ref: Demo1D,
    guess: Demo1D,
    sigma_v: Optional[float] = None,
    v_near_zero: Optional[float] = None,
) -> np.ndarray:
    """Velocity-compatibility weights for each correspondence pair.

    Pairs where either velocity is below ``v_near_zero`` get weight 0; the rest
    decay as ``exp(-|v_ref - v_guess| / sigma_v)``. Defaults: ``sigma_v`` is
    the standard deviation of the reference velocity, ``v_near_zero`` 15% of
    its peak magnitude. Timing is poorly determined where the signal barely
    moves, so the cutoff is set well above the noise floor. Returns the
    diagonal as a vector.
    """
    v_ref = ref.v[c.pairs[:, 0]]
    v_guess = guess.v[c.pairs[:, 1]]
    if sigma_v is None:
        sigma_v = float(np.std(ref.v)) or 1.0
    if v_near_zero is None:
        v_near_zero = NEAR_ZERO_FRACTION * float(np.max(np.abs(ref.v)))
    w = np.exp(-np.abs(v_ref - v_guess) / sigma_v)
    w[np.minimum(np.abs(v_ref), np.abs(v_guess)) < v_near_zero] = 0.0
    return w


def solve_wls(A: np.ndarray, b: np.ndarray, W) -> AlignmentParams:
    """Weighted least squares ``(A^T W A)^-1 A^T W b``.

    ``W`` is a weight vector or a diagonal matrix. When the weighted problem
    is rank deficient the ordinary solution is returned with a warning.
    """
    w = np.asarray(W, dtype=float)
    if w.ndim == 2:
        w = np.diag(w)
    AtW = A.T * w
    M = AtW @ A
    if np.count_nonzero(w > 0) < 2 or np.linalg.cond(M) > COND_LIMIT:
        warnings.warn("weighted alignment is rank deficient; falling back to unweighted LS", AlignmentWarning)
        x = np.linalg.solve(A.T @ A, A.T @ b)
    else:
        x = np.linalg.solve(M, AtW @ b)
    return AlignmentParams(a=float(x[0]), b=float(x[1]))


def refine_indices(
    s_guess: int, ref_span: tuple[int, int], eps: int, align: AlignmentParams, length: Optional[int] = None
) -> tuple[int, int]:
    """Refined ``(i_s, i_e)`` of a guessed segment, clamped to ``[0, length-1]``."""
    s1, e1 = ref_span
    i_s = s_guess + align.b + (align.a - 1.0) * eps
    i_e = i_s + align.a * (e1 - s1)
    i_s, i_e = int(round(i_s)), int(round(i_e))
    if length is not None:
        i_s = min(max(i_s, 0), length - 1)
        i_e = min(max(i_e, 0), length - 1)
    if i_e <= i_s:
        raise SegmentationError(f"degenerate refined segment [{i_s}, {i_e}]")
    return i_s, i_e


@dataclass
class AlignmentReport:
    demo: str
    primitive: int
    a: float = float("nan")
    b: float = float("nan")
    delay: float = float("nan")  # b expressed in absolute indices: j = a * i + delay
    residual: float = float("nan")
    span: Optional[tuple[int, int]] = None
    dtw_cells: int = 0  # summed over passes
    cells_per_pass: list = field(default_factory=list)
    n_passes: int = 0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _fit_window(ref_seg, guess_seg, g, weighted, norm, n_end):
    if g > 1:
        ref_seg, guess_seg = ref_seg.downsample(g), guess_seg.downsample(g)
    res = dtw_correspondences(ref_seg, guess_seg, return_result=True, norm=norm, n_end=n_end)
    A, rhs = construct_ls(res.pairs)
    w = compute_ls_weights(res.pairs, ref_seg, guess_seg) if weighted else np.ones(len(res.pairs))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AlignmentWarning)
        x = solve_wls(A, rhs, w)
    residual = float(np.sqrt(np.sum(w * (A @ [x.a, x.b] - rhs) ** 2) / max(np.sum(w), 1e-12)))
    # Down-sampled indices keep the scale and shrink the delay by g.
    return AlignmentParams(a=x.a, b=x.b * g), res.cells, residual * g


def align_segment(
    ref_demo: Demo1D,
    ref_span: tuple[int, int],
    demo: Demo1D,
    h: float,
    eps: int,
    g: int = 1,
    weighted: bool = True,
    search_start: int = 0,
    max_passes: int = 4,
    norm: str = "endpoints",
) -> AlignmentReport:
    """Refined segmentation of one primitive in one demo (inner body of Alg. 1).

    The first pass aligns the ZVC guess widened by ``eps``. The ZVC guess of a
    slower or faster demo crosses ``h`` at a different point of its motion, so
    later passes re-cut the guess window as the image of the reference window
    under the current ``(a, b)`` and fit again, stopping once the window no
    longer moves. ``max_passes=1`` gives the single-shot method.
    """
    report = AlignmentReport(demo=demo.name, primitive=-1)
    s1, e1 = ref_span
    ref_lo = max(s1 - eps, 0)
    ref_seg = ref_demo.segment(ref_lo, e1 + eps)
    ref_len = len(ref_seg) - 1
    s_l, e_l = zvc_segment(demo, h, start=search_start)
    lo, hi = max(s_l - eps, 0), min(e_l + eps, len(demo) - 1)
    # Resting levels are read from the widened margins.
    n_end = max(3, int(round(END_FRACTION * eps / g)))
    cells = 0
    for n_pass in range(1, max(1, max_passes) + 1):
        align, c, residual = _fit_window(ref_seg, demo.segment(lo, hi), g, weighted, norm, n_end)
        cells += c
        report.cells_per_pass.append(c)
        if not align.a > 0:
            break
        new_lo = max(int(round(lo + align.b)), 0)
        new_hi = min(int(round(lo + align.b + align.a * ref_len)), len(demo) - 1)
        if (new_lo, new_hi) == (lo, hi) or new_hi - new_lo < 2 or n_pass == max_passes:
            break
        lo, hi = new_lo, new_hi
    if not align.a > 0:
        raise SegmentationError(f"non-positive time scale a={align.a:.3g} in demo {demo.name!r}")
    # The reference window may have been clipped at index 0.
    eps_ref = s1 - ref_lo
    report.span = refine_indices(lo + eps_ref, ref_span, eps_ref, align, len(demo))
    report.a, report.b = align.a, align.b
    report.delay = lo + align.b - align.a * ref_lo
    report.residual = residual
    report.dtw_cells = cells
    report.n_passes = n_pass
    return report


@dataclass
class SegmentationResult:
    segments: list = field(default_factory=list)  # segments[p][l] = (i_s, i_e) or None
    reports: list = field(default_factory=list)

    @property
    def failures(self) -> list:
        return [r for r in self.reports if not r.ok]

    @property
    def dtw_cells(self) -> int:
        return sum(r.dtw_cells for r in self.reports)


def segment_demos(
    demos: Sequence[dict],
    refs: Sequence[tuple[int, int]],
    axes: Sequence[str],
    h: float,
    eps: int,
    g: int = 1,
    weighted: bool = True,
    gap_primitives: Sequence[int] = (),
    max_passes: int = 4,
) -> SegmentationResult:
    """Segment demos ``1..L-1`` against the reference cut of demo 0.

    ``demos[l]`` maps axis names to :class:`Demo1D`; ``refs[p]`` is the
    reference span of primitive ``p`` in demo 0 and ``axes[p]`` the axis used
    to align it. A primitive listed in ``gap_primitives`` has no axis of its
    own; it becomes the stretch between its neighbours' refined segments.
    Failures are recorded per demo and never abort the batch.
    """
    P = len(refs)
    if len(axes) != P:
        raise ValueError("one axis per primitive required")
    result = SegmentationResult(segments=[[refs[p]] for p in range(P)])
    for l in range(1, len(demos)):
        prev_end = 0
        for p in range(P):
            if p in gap_primitives:
                result.segments[p].append(None)
                continue
            name = axes[p]
            demo = demos[l][name]
            try:
                rep = align_segment(
                    demos[0][name], refs[p], demo, h, eps, g, weighted, search_start=prev_end, max_passes=max_passes
                )
                rep.primitive = p
                prev_end = rep.span[1]
                result.segments[p].append(rep.span)
            except (SegmentationError, np.linalg.LinAlgError, ValueError) as exc:
                rep = AlignmentReport(demo=demo.name, primitive=p, error=str(exc))
                log.warning("demo %s primitive %d: %s", demo.name, p, exc)
                result.segments[p].append(None)
            result.reports.append(rep)
    for p in gap_primitives:
        for l in range(len(demos)):
            before = result.segments[p - 1][l] if p > 0 else None
            after = result.segments[p + 1][l] if p + 1 < P else None
            if before is None or after is None or after[0] <= before[1]:
                result.segments[p][l] = None
                if l > 0:
                    result.reports.append(AlignmentReport(demo=str(l), primitive=p, error="neighbouring segments missing"))
            else:
                result.segments[p][l] = (before[1], after[0])
    return result
