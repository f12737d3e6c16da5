"""Phase-modulated neural network (PMNN) feedback model.

One independent network per coupling dimension maps the sensor deviation
``ds`` to a coupling term. The last hidden layer is multiplied element-wise by
the phase modulation ``Phi(p, u)`` of the canonical system, and the output
layer has no bias, so the coupling vanishes whenever ``u`` does.

Gradients are written out by hand; training is mini-batch RMSProp with
inverted dropout on the regular hidden layers.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .canonical import KernelBank, default_bank, phase_modulation

log = logging.getLogger(__name__)

ACTIVATION = "tanh"
DEFAULT_HIDDEN = (100,)


class PmnnShapeError(ValueError):
    pass


class DivergenceWarning(RuntimeWarning):
    pass


@dataclass
class PmnnNet:
    """Weights of the network for one output dimension.

    ``W[l]`` has shape ``(H_l, H_{l-1})`` with ``H_0 = S``; ``Wm`` maps the
    last hidden layer to the ``N`` phase-modulated nodes.
    """

    W: list
    b: list
    Wm: np.ndarray
    bm: np.ndarray
    wcm: np.ndarray

    def arrays(self) -> list:
        return [*self.W, *self.b, self.Wm, self.bm, self.wcm]

    def copy(self) -> "PmnnNet":
        return PmnnNet([w.copy() for w in self.W], [v.copy() for v in self.b], self.Wm.copy(), self.bm.copy(), self.wcm.copy())

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class PmnnParams:
    nets: list  # one PmnnNet per coupling dimension
    bank: KernelBank = field(default_factory=default_bank)

    def __post_init__(self):
        if not self.nets:
            raise PmnnShapeError("need at least one output network")
        S = self.n_inputs
        for net in self.nets:
            if len(net.W) != len(net.b) or not net.W:
                raise PmnnShapeError("each net needs matching hidden weights and biases")
            prev = S
            for W, b in zip(net.W, net.b):
                if W.ndim != 2 or W.shape[1] != prev or b.shape != (W.shape[0],):
                    raise PmnnShapeError(f"hidden layer shape {W.shape} does not follow width {prev}")
                prev = W.shape[0]
            if net.Wm.shape != (self.bank.n, prev) or net.bm.shape != (self.bank.n,) or net.wcm.shape != (self.bank.n,):
                raise PmnnShapeError("modulation layer must have one node per phase kernel")

    @property
    def n_inputs(self) -> int:
        return self.nets[0].W[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return len(self.nets)

    @property
    def hidden(self) -> tuple:
        return tuple(W.shape[0] for W in self.nets[0].W)

    @property
    def n_params(self) -> int:
        return sum(net.n_params for net in self.nets)

    def copy(self) -> "PmnnParams":
        return PmnnParams([net.copy() for net in self.nets], self.bank)

    def to_dict(self) -> dict:
        return {
            "activation": ACTIVATION,
            "n_inputs": self.n_inputs,
            "hidden": list(self.hidden),
            "n_kernels": self.bank.n,
            "bank": self.bank.to_dict(),
            "nets": [
                {
                    "W": [w.tolist() for w in net.W],
                    "b": [v.tolist() for v in net.b],
                    "Wm": net.Wm.tolist(),
                    "bm": net.bm.tolist(),
                    "wcm": net.wcm.tolist(),
                }
                for net in self.nets
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PmnnParams":
        if d.get("activation", ACTIVATION) != ACTIVATION:
            raise PmnnShapeError(f"unsupported activation {d['activation']!r}")
        nets = [
            PmnnNet(
                [np.array(w, dtype=float) for w in n["W"]],
                [np.array(v, dtype=float) for v in n["b"]],
                np.array(n["Wm"], dtype=float),
                np.array(n["bm"], dtype=float),
                np.array(n["wcm"], dtype=float),
            )
            for n in d["nets"]
        ]
        return cls(nets, KernelBank.from_dict(d["bank"]))


def init_params(
    n_inputs: int,
    n_outputs: int = 1,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    bank: Optional[KernelBank] = None,
    rng: Optional[np.random.Generator] = None,
) -> PmnnParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` weights and zero biases."""
    bank = default_bank() if bank is None else bank
    rng = np.random.default_rng(0) if rng is None else rng

    def layer(n_out, n_in):
        lim = 1.0 / np.sqrt(n_in)
        return rng.uniform(-lim, lim, size=(n_out, n_in))

    nets = []
    for _ in range(n_outputs):
        widths = [n_inputs, *hidden]
        W = [layer(widths[i + 1], widths[i]) for i in range(len(hidden))]
        b = [np.zeros(h) for h in hidden]
        Wm = layer(bank.n, widths[-1])
        wcm = rng.uniform(-1.0, 1.0, size=bank.n) / np.sqrt(bank.n)
        nets.append(PmnnNet(W, b, Wm, np.zeros(bank.n), wcm))
    return PmnnParams(nets, bank)


@dataclass
class FeedbackDataset:
    """Supervised rows ``(ds, (p, u)) -> c_target``.

    ``groups`` tags each row with the demonstration it came from, which the
    leave-one-demonstration-out harness needs. ``weights`` scales each row's
    squared error in the training loss (default 1).
    """

    ds: np.ndarray
    phase: np.ndarray
    target: np.ndarray
    groups: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ds = np.atleast_2d(np.asarray(self.ds, dtype=float))
        self.phase = np.asarray(self.phase, dtype=float).reshape(-1, 2)
        target = np.asarray(self.target, dtype=float)
        self.target = target.reshape(len(target), -1) if target.ndim < 2 else target
        T = len(self.ds)
        if len(self.phase) != T or len(self.target) != T:
            raise PmnnShapeError("inputs, phases and targets must have equal row counts")
        for name in ("ds", "phase", "target"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")
        if self.groups is None:
            self.groups = np.zeros(T, dtype=int)
        self.groups = np.asarray(self.groups, dtype=int)
        if len(self.groups) != T:
            raise PmnnShapeError("groups must tag every row")
        self.weights = np.ones(T) if self.weights is None else np.asarray(self.weights, dtype=float)
        if len(self.weights) != T:
            raise PmnnShapeError("weights must cover every row")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("row weights must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.ds)

    def subset(self, idx) -> "FeedbackDataset":
        return FeedbackDataset(self.ds[idx], self.phase[idx], self.target[idx], self.groups[idx], self.weights[idx])

    @staticmethod
    def concat(parts: Sequence["FeedbackDataset"]) -> "FeedbackDataset":
        parts = [p for p in parts if len(p)]
        return FeedbackDataset(
            np.concatenate([p.ds for p in parts]),
            np.concatenate([p.phase for p in parts]),
            np.concatenate([p.target for p in parts]),
            np.concatenate([p.groups for p in parts]),
            np.concatenate([p.weights for p in parts]),
        )

    @classmethod
    def from_rollouts(cls, rollouts, targets, groups=None) -> "FeedbackDataset":
        """Rows from rollouts (``ds`` and ``phase`` recorded) and their targets."""
        rollouts = list(rollouts)
        if groups is None:
            groups = range(len(rollouts))
        return cls.concat(
            [
                cls(r.ds, r.phase, np.asarray(c), np.full(len(r), g))
                for r, c, g in zip(rollouts, targets, groups)
            ]
        )


# ---------------------------------------------------------------------------
# forward pass, loss and gradient
# ---------------------------------------------------------------------------


def _net_forward(net: PmnnNet, X: np.ndarray, Phi: np.ndarray, masks=None):
    hs = [X]
    h = X
    for l, (W, b) in enumerate(zip(net.W, net.b)):
        h = np.tanh(h @ W.T + b)
        if masks is not None:
            h = h * masks[l]
        hs.append(h)
    z = h @ net.Wm.T + net.bm
    m = Phi * z
    return m @ net.wcm, hs, m


def pmnn_forward(params: PmnnParams, ds, p, u) -> np.ndarray:
    """Coupling ``c`` for one sample (``ds`` of shape ``(S,)``, scalar phase)
    or a batch (``(T, S)`` with ``(T,)`` phases)."""
    ds = np.asarray(ds, dtype=float)
    single = ds.ndim == 1
    X = np.atleast_2d(ds)
    if X.shape[1] != params.n_inputs:
        raise PmnnShapeError(f"expected {params.n_inputs} sensor channels, got {X.shape[1]}")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if p.shape != (len(X),) or u.shape != (len(X),):
        raise PmnnShapeError("phase arrays must have one entry per input row")
    Phi = phase_modulation(params.bank, p, u)
    out = np.column_stack([_net_forward(net, X, Phi)[0] for net in params.nets])
    return out[0] if single else out


def pmnn_loss(params: PmnnParams, data: FeedbackDataset) -> float:
    """Row-weighted sum of squared residuals over all rows and output dimensions."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    pred = pmnn_forward(params, data.ds, data.phase[:, 0], data.phase[:, 1])
    return float(np.sum(data.weights[:, None] * (data.target - pred) ** 2))


def _net_grad(net: PmnnNet, X, Phi, y, masks=None, w=None):
    c, hs, m = _net_forward(net, X, Phi, masks)
    r = c - y
    wr = r if w is None else w * r
    dc = 2.0 * wr
    g_wcm = m.T @ dc
    dz = (dc[:, None] * net.wcm) * Phi
    g_Wm = dz.T @ hs[-1]
    g_bm = dz.sum(axis=0)
    dh = dz @ net.Wm
    L = len(net.W)
    gW = [None] * L
    gb = [None] * L
    for l in range(L - 1, -1, -1):
        h = hs[l + 1]
        if masks is not None:
            # h = tanh(a) * mask, so dh/da = mask * (1 - tanh(a)^2)
            keep = masks[l]
            t = np.divide(h, keep, out=np.zeros_like(h), where=keep != 0)
            da = dh * keep * (1.0 - t * t)
        else:
            da = dh * (1.0 - h * h)
        gW[l] = da.T @ hs[l]
        gb[l] = da.sum(axis=0)
        if l > 0:
            dh = da @ net.W[l]
    return PmnnNet(gW, gb, g_Wm, g_bm, g_wcm), float(np.sum(wr * r))


def pmnn_grad(params: PmnnParams, data: FeedbackDataset) -> PmnnParams:
    """Exact gradient of :func:`pmnn_loss`, returned as a ``PmnnParams``."""
    Phi = phase_modulation(params.bank, data.phase[:, 0], data.phase[:, 1])
    grads = [_net_grad(net, data.ds, Phi, data.target[:, d], w=data.weights)[0] for d, net in enumerate(params.nets)]
    return PmnnParams(grads, params.bank)


def nmse(target: np.ndarray, pred: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """Mean squared error over target variance, averaged over output dims.

    With row ``weights`` both the error and the variance are weighted means.
    """
    target = np.asarray(target, dtype=float).reshape(len(target), -1)
    pred = np.asarray(pred, dtype=float).reshape(len(pred), -1)
    w = np.ones(len(target)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = w @ target
    var = w @ (target - mean) ** 2
    mse = w @ (target - pred) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        per_dim = np.where(var > 0, mse / np.where(var > 0, var, 1.0), np.nan)
    return float(np.mean(per_dim))


def evaluate_nmse(params: PmnnParams, data: FeedbackDataset) -> float:
    if len(data) == 0:
        return float("nan")
    return nmse(data.target, pmnn_forward(params, data.ds, data.phase[:, 0], data.phase[:, 1]), data.weights)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    hidden: tuple = DEFAULT_HIDDEN
    epochs: int = 100
    learning_rate: float = 1e-3
    dropout: float = 0.5
    batch_size: int = 64
    decay: float = 0.9
    eps: float = 1e-8
    val_fraction: float = 0.075
    test_fraction: float = 0.075
    seed: int = 0
    normalize: bool = True
    overfit_guard: bool = False
    average: float = 0.0  # decay of an exponential moving average of the weights; 0 disables it

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainResult:
    params: PmnnParams
    history: list  # per-epoch dicts: epoch, train_loss, train_nmse, val_nmse
    train_nmse: float
    val_nmse: float
    test_nmse: float
    diverged: bool = False
    best_epoch: int = -1


def _split(n: int, cfg: TrainConfig, rng: np.random.Generator):
    idx = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    n_test = int(round(cfg.test_fraction * n))
    return idx[n_val + n_test:], idx[:n_val], idx[n_val:n_val + n_test]


def _normalizer(data: FeedbackDataset):
    mu = data.ds.mean(axis=0)
    sd = data.ds.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    ysd = data.target.std(axis=0)
    ysd = np.where(ysd > 1e-12, ysd, 1.0)
    return mu, sd, ysd


def _to_normalized(params: PmnnParams, mu, sd, ysd) -> PmnnParams:
    out = params.copy()
    for d, net in enumerate(out.nets):
        W0 = net.W[0]
        net.b[0] = net.b[0] + W0 @ mu
        net.W[0] = W0 * sd
        net.wcm = net.wcm / ysd[d]
    return out


def _from_normalized(params: PmnnParams, mu, sd, ysd) -> PmnnParams:
    """Fold input standardization and target scaling back into the weights."""
    out = params.copy()
    for d, net in enumerate(out.nets):
        W0 = net.W[0] / sd
        net.W[0] = W0
        net.b[0] = net.b[0] - W0 @ mu
        net.wcm = net.wcm * ysd[d]
    return out


def pmnn_train(
    data: FeedbackDataset,
    config: Optional[TrainConfig] = None,
    init: Optional[PmnnParams] = None,
    n_outputs: Optional[int] = None,
    bank: Optional[KernelBank] = None,
    monitor: Optional[dict] = None,
) -> TrainResult:
    """Mini-batch RMSProp on the summed squared error.

    Rows are shuffled once into train/validation/test parts. Inputs and
    targets are standardized on the training part while optimizing; the
    scaling is folded back into the first layer and the output weights, so
    the returned network consumes raw ``ds`` and emits raw coupling. The
    parameters with the best validation NMSE are returned. ``init`` warm
    starts from an existing model. ``monitor`` maps names to extra datasets
    whose NMSE is recorded every epoch (used by the leave-one-out harness).
    """
    cfg = TrainConfig() if config is None else config
    if len(data) < 2:
        raise ValueError("need at least two training rows")
    rng = np.random.default_rng(cfg.seed)
    D = data.target.shape[1] if n_outputs is None else n_outputs
    S = data.ds.shape[1]
    if init is None:
        params = init_params(S, D, cfg.hidden, bank, rng)
    else:
        params = init.copy()
        if params.n_inputs != S or params.n_outputs != D:
            raise PmnnShapeError("warm-start model does not match the dataset")
    if cfg.overfit_guard and len(data) < 10 * params.n_params:
        raise ValueError(
            f"{len(data)} rows for {params.n_params} parameters; need 10x rows or disable the overfit guard"
        )
    tr, va, te = _split(len(data), cfg, rng)
    train, val, test = data.subset(tr), data.subset(va), data.subset(te)
    if cfg.normalize:
        mu, sd, ysd = _normalizer(train)
    else:
        mu, sd, ysd = np.zeros(S), np.ones(S), np.ones(D)
    X = (train.ds - mu) / sd
    Y = train.target / ysd
    # Non-uniform row weights act through the sampling of mini-batches, which
    # keeps the scale of the RMSProp steps unchanged.
    p_row = None if np.all(train.weights == train.weights[0]) else train.weights / train.weights.sum()
    Phi = phase_modulation(params.bank, train.phase[:, 0], train.phase[:, 1])
    work = _to_normalized(params, mu, sd, ysd)
    cache = [[np.zeros_like(a) for a in net.arrays()] for net in work.nets]
    keep = 1.0 - cfg.dropout
    if not 0.0 < keep <= 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")

    if not 0.0 <= cfg.average < 1.0:
        raise ValueError("average must lie in [0, 1)")
    shadow = work.copy() if cfg.average > 0 else None

    def finish(p):
        return _from_normalized(shadow if shadow is not None else p, mu, sd, ysd)

    def score(p_raw, part):
        return evaluate_nmse(p_raw, part) if len(part) else float("nan")

    best = finish(work)
    best_val = score(best, val)
    best_epoch = 0
    history = []
    diverged = False
    n = len(X)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if p_row is None else rng.choice(n, size=n, p=p_row)
        total = 0.0
        last_good = [net.copy() for net in work.nets]
        for start in range(0, n, cfg.batch_size):
            bi = order[start:start + cfg.batch_size]
            for d, net in enumerate(work.nets):
                masks = None
                if cfg.dropout > 0:
                    masks = [(rng.random((len(bi), h)) < keep) / keep for h in _widths(net)]
                g, loss = _net_grad(net, X[bi], Phi[bi], Y[bi, d], masks)
                total += loss
                for a, ga, r in zip(net.arrays(), g.arrays(), cache[d]):
                    r *= cfg.decay
                    r += (1.0 - cfg.decay) * ga * ga
                    a -= cfg.learning_rate * ga / (np.sqrt(r) + cfg.eps)
            if shadow is not None:
                for net, snet in zip(work.nets, shadow.nets):
                    for a, sa in zip(net.arrays(), snet.arrays()):
                        sa *= cfg.average
                        sa += (1.0 - cfg.average) * a
        if not np.isfinite(total) or not all(np.all(np.isfinite(a)) for net in work.nets for a in net.arrays()):
            warnings.warn(f"training diverged at epoch {epoch}; keeping the last finite weights", DivergenceWarning)
            work.nets = last_good
            if shadow is not None:
                shadow = work.copy()
            diverged = True
            break
        current = finish(work)
        rec = {
            "epoch": epoch,
            "train_loss": total,
            "train_nmse": score(current, train),
            "val_nmse": score(current, val),
            "test_nmse": score(current, test),
        }
        if monitor:
            for name, part in monitor.items():
                rec[f"{name}_nmse"] = score(current, part)
        history.append(rec)
        # Without a validation split the latest weights are kept.
        if not len(val) or not np.isfinite(best_val) or rec["val_nmse"] <= best_val:
            best, best_val, best_epoch = current, rec["val_nmse"], epoch
    if diverged and best_epoch == 0:
        best = finish(work)
    return TrainResult(
        params=best,
        history=history,
        train_nmse=score(best, train),
        val_nmse=score(best, val),
        test_nmse=score(best, test),
        diverged=diverged,
        best_epoch=best_epoch,
    )


def _widths(net: PmnnNet) -> list:
    return [W.shape[0] for W in net.W]


def params_like(params: PmnnParams, arrays: Sequence[np.ndarray]) -> PmnnParams:
    """Rebuild a ``PmnnParams`` from a flat list in :meth:`PmnnNet.arrays` order."""
    out = params.copy()
    it = iter(arrays)
    for net in out.nets:
        L = len(net.W)
        net.W = [np.array(next(it)) for _ in range(L)]
        net.b = [np.array(next(it)) for _ in range(L)]
        net.Wm, net.bm, net.wcm = np.array(next(it)), np.array(next(it)), np.array(next(it))
    return out


def flat_arrays(params: PmnnParams) -> list:
    return [a for net in params.nets for a in net.arrays()]


# ---------------------------------------------------------------------------
# leave-one-demonstration-out evaluation
# ---------------------------------------------------------------------------


@dataclass
class LoodoFold:
    held_out: int
    n_train: int
    n_val: int
    n_test: int
    n_generalization: int
    train: float
    val: float
    test: float
    generalization: float
    epoch: int


def leave_one_demo_out(
    data: FeedbackDataset, config: Optional[TrainConfig] = None, demos: Optional[Sequence[int]] = None
) -> list:
    """Leave-one-demonstration-out test.

    Fold ``k`` holds out every row tagged with demo ``k`` (across all
    settings) for generalization; the rest is shuffled and split 85/7.5/7.5
    into train/validation/test. Each fold reports the four NMSEs at the epoch
    with the lowest generalization NMSE.
    """
    cfg = TrainConfig() if config is None else config
    ids = np.unique(data.groups) if demos is None else np.asarray(demos)
    folds = []
    for k in ids:
        held = data.groups == k
        rest = data.subset(~held)
        gen = data.subset(held)
        fold_cfg = TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + int(k)})
        res = pmnn_train(rest, fold_cfg, monitor={"generalization": gen})
        n_val = int(round(fold_cfg.val_fraction * len(rest)))
        n_test = int(round(fold_cfg.test_fraction * len(rest)))
        # Re-score the split parts at the epoch chosen by generalization NMSE.
        hist = res.history
        best = min(hist, key=lambda r: r["generalization_nmse"]) if hist else None
        folds.append(
            LoodoFold(
                held_out=int(k),
                n_train=len(rest) - n_val - n_test,
                n_val=n_val,
                n_test=n_test,
                n_generalization=int(held.sum()),
                train=best["train_nmse"] if best else res.train_nmse,
                val=best["val_nmse"] if best else res.val_nmse,
                test=best["test_nmse"] if best else res.test_nmse,
                generalization=best["generalization_nmse"] if best else evaluate_nmse(res.params, gen),
                epoch=best["epoch"] if best else 0,
            )
        )
    return folds
