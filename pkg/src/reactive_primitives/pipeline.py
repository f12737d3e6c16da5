"""Phase-by-phase pipeline with file-based handoff.

Every phase reads the artifacts of the previous one from disk and writes its
own, so each CLI command can run separately. All randomness derives from the
global seed through named sub-seeds (written to ``reports/seeds.json``).
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import io, testbed
from .canonical import default_bank
from .dmp import Rollout, differentiate_orientation, encode_sensor_traces, extract_target_coupling, fit_forcing_term, unroll
from .pmnn import FeedbackDataset, TrainConfig, leave_one_demo_out, pmnn_train
from .rl import RlConfig, rl_feedback
from .segmentation import Demo1D, segment_demos, zvc_segment

log = logging.getLogger(__name__)

N_PRIMITIVES = 3


class MissingArtifact(FileNotFoundError):
    """An upstream phase has not been run."""

    def __init__(self, path, phase: str):
        super().__init__(f"{path} not found; run `{phase}` first")
        self.phase = phase


def sub_seed(seed: int, name: str) -> int:
    """Deterministic named child seed of the global seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class PipelineConfig:
    seed: int
    out: str = "run"
    demo_dir: Optional[str] = None
    segment_dir: Optional[str] = None
    model_dir: Optional[str] = None
    report_dir: Optional[str] = None
    corpus: dict = field(default_factory=lambda: {"n_demos": 11, "rate": 300.0, "noise": 0.01})
    segmentation: dict = field(
        default_factory=lambda: {"h": 0.1, "eps": 50, "g": 1, "weighted": True, "axes": ["z", None, "y"], "gap_primitives": [2]}
    )
    n_kernels: int = 25
    plant: dict = field(default_factory=dict)
    fb_primitives: tuple = (2, 3)  # 1-based, like gap_primitives
    n_corrected: int = 15
    n_expected: int = 5
    pmnn: dict = field(default_factory=lambda: {"epochs": 30, "dropout": 0.0, "average": 0.999})
    loodo_folds: int = 0
    rl: dict = field(
        default_factory=lambda: {
            "K": 38,
            "max_iters": 2,
            "full_sum": True,
            "sigma0_reference": "correction",
            "sigma0_fraction": 0.25,
            "additional_weight": 5.0,
            "retrain": {"epochs": 30},
        }
    )
    J_thr: float = 0.05
    rl_setting: float = testbed.RL_SETTING
    eval_runs: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if d.get("seed") is None:
            raise ValueError("config must set a seed")
        d = dict(d)
        if "fb_primitives" in d:
            d["fb_primitives"] = tuple(d["fb_primitives"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        d = io.load_json(path)
        d.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls.from_dict(d)
        base = Path(path).parent
        if not Path(cfg.out).is_absolute() and overrides.get("out") is None:
            cfg.out = str(base / cfg.out)
        return cfg

    def _dir(self, explicit, name) -> Path:
        return Path(explicit) if explicit else Path(self.out) / name

    @property
    def demos(self) -> Path:
        return self._dir(self.demo_dir, "corpus")

    @property
    def segments(self) -> Path:
        return self._dir(self.segment_dir, "segments")

    @property
    def models(self) -> Path:
        return self._dir(self.model_dir, "models")

    @property
    def reports(self) -> Path:
        return self._dir(self.report_dir, "reports")

    @property
    def fb_indices(self) -> tuple:
        return tuple(p - 1 for p in self.fb_primitives)

    def plant_config(self) -> testbed.PlantConfig:
        d = {"seed": sub_seed(self.seed, "plant"), **self.plant}
        return testbed.PlantConfig.from_dict(d)

    def rl_config(self, primitive: int) -> RlConfig:
        d = dict(self.rl)
        d["retrain"] = TrainConfig.from_dict({**self.pmnn, **d.get("retrain", {}), "seed": sub_seed(self.seed, f"retrain{primitive}")})
        d.setdefault("seed", sub_seed(self.seed, f"rl{primitive}"))
        return RlConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def _require(path: Path, phase: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, phase)
    return path


def _log_seeds(cfg: PipelineConfig, names) -> None:
    path = cfg.reports / "seeds.json"
    seeds = json.loads(path.read_text()) if path.exists() else {}
    seeds["global"] = cfg.seed
    seeds.update({n: sub_seed(cfg.seed, n) for n in names})
    cfg.reports.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(seeds, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# phase 0: synthetic corpus
# ---------------------------------------------------------------------------


def make_corpus(cfg: PipelineConfig) -> list:
    c = cfg.corpus
    records = testbed.make_demo_corpus(int(c["n_demos"]), sub_seed(cfg.seed, "corpus"), float(c["rate"]), float(c["noise"]))
    for rec in records:
        omega, omegadot = differentiate_orientation(rec.times, rec.Q)
        io.write_trajectory(cfg.demos / f"{rec.name}.csv", rec.times, rec.Q, omega, omegadot, positions=rec.pos)
    (cfg.demos / "truth.json").write_text(json.dumps({r.name: r.spans for r in records}, indent=1))
    _log_seeds(cfg, ["corpus"])
    return records


# ---------------------------------------------------------------------------
# phase 1: segmentation and nominal primitives
# ---------------------------------------------------------------------------


def _load_corpus(cfg: PipelineConfig):
    files = sorted(_require(cfg.demos, "make-corpus").glob("*.csv"))
    if not files:
        raise MissingArtifact(cfg.demos / "*.csv", "make-corpus")
    demos = []
    for f in files:
        roll, pos = io.read_trajectory(f)
        if pos is None:
            raise io.FormatError(f"{f}: position columns x,y,z are required for segmentation")
        demos.append((f.stem, roll, pos))
    return demos


def run_segment(cfg: PipelineConfig) -> dict:
    """Cut every demo into the primitives; returns the JSON report."""
    s = cfg.segmentation
    demos = _load_corpus(cfg)
    axes = list(s["axes"])
    gaps = tuple(p - 1 for p in s.get("gap_primitives", ()))
    rate = 1.0 / demos[0][1].dt
    per_axis = [{ax: Demo1D.from_positions(pos[:, "xyz".index(ax)], rate, f"{name}:{ax}") for ax in set(axes) if ax} for name, _, pos in demos]
    # Reference cuts on the first demo, each searched after the previous one.
    refs = []
    prev = 0
    for p, ax in enumerate(axes):
        if p in gaps:
            refs.append((0, 0))
            continue
        span = zvc_segment(per_axis[0][ax], float(s["h"]), start=prev)
        refs.append(span)
        prev = span[1] + 1
    result = segment_demos(
        per_axis, refs, axes, float(s["h"]), int(s["eps"]), int(s.get("g", 1)), bool(s.get("weighted", True)), gaps
    )
    for p in range(len(axes)):
        for l, (name, roll, pos) in enumerate(demos):
            span = result.segments[p][l]
            if span is None:
                continue
            a, b = span
            sl = slice(a, b + 1)
            io.write_trajectory(
                cfg.segments / f"prim{p + 1}" / f"{name}.csv",
                roll.times[sl] - roll.times[a], roll.Q[sl], roll.omega[sl], roll.omegadot[sl], positions=pos[sl],
            )
    report = {
        "reference": [list(map(int, result.segments[p][0])) if result.segments[p][0] else None for p in range(len(axes))],
        "segments": [[list(map(int, sp)) if sp else None for sp in result.segments[p]] for p in range(len(axes))],
        "alignments": [
            {
                "demo": r.demo,
                "primitive": r.primitive + 1,
                "a": r.a,
                "b": r.b,
                "residual": r.residual,
                "span": list(map(int, r.span)) if r.span else None,
                "error": r.error,
            }
            for r in result.reports
        ],
        "n_failures": len(result.failures),
    }
    cfg.reports.mkdir(parents=True, exist_ok=True)
    (cfg.reports / "segmentation.json").write_text(json.dumps(report, indent=1))
    return report


def _load_segments(cfg: PipelineConfig, p: int) -> list:
    d = _require(cfg.segments / f"prim{p + 1}", "segment")
    out = []
    for f in sorted(d.glob("*.csv")):
        roll, _ = io.read_trajectory(f)
        # segment CSVs cover the movement itself, so tau is their duration
        out.append(replace(roll, tau=float(roll.times[-1] - roll.times[0])))
    if not out:
        raise MissingArtifact(d / "*.csv", "segment")
    return out


def run_learn_dmp(cfg: PipelineConfig) -> list:
    bank = default_bank(cfg.n_kernels)
    noms = []
    for p in range(N_PRIMITIVES):
        nom = fit_forcing_term(_load_segments(cfg, p), bank)
        io.save_primitive(cfg.models / f"primitive{p + 1}.json", nom)
        noms.append(nom)
    return noms


def _load_nominal(cfg: PipelineConfig, p: int):
    return io.load_primitive(_require(cfg.models / f"primitive{p + 1}.json", "learn-dmp"))


# ---------------------------------------------------------------------------
# phase 2: feedback model from corrected demonstrations
# ---------------------------------------------------------------------------


def make_plant(cfg: PipelineConfig, nominal, p: int, roll_deg: float) -> testbed.PlantHandle:
    """Plant for primitive ``p``; primitive 1 needs no correction."""
    return testbed.PlantHandle.create(
        testbed.EnvSetting(roll_deg), nominal, cfg.plant_config(), active=p in cfg.fb_indices,
        base_traces=None,
    )


def corrected_dataset(cfg: PipelineConfig, nominal, expected, p: int) -> FeedbackDataset:
    """Rows from the corrected demos at the seen settings; demo ``j`` of every
    setting shares group ``j``."""
    parts = []
    for d in testbed.SEEN:
        plant = make_plant(cfg, nominal, p, d)
        demos = testbed.generate_corrected_demos(plant, nominal, cfg.n_corrected, sub_seed(cfg.seed, f"cdemo{p}"), expected)
        for j, r in enumerate(demos):
            target = extract_target_coupling(r, nominal, r.phase)[:, [testbed.ROLL]]
            parts.append(FeedbackDataset(r.ds, r.phase, target, np.full(len(r), j)))
    return FeedbackDataset.concat(parts)


def run_learn_fb(cfg: PipelineConfig) -> dict:
    metrics = {}
    for p in cfg.fb_indices:
        nominal, _ = _load_nominal(cfg, p)
        default = make_plant(cfg, nominal, p, 0.0)
        runs = []
        for k in range(cfg.n_expected):
            default.reseed(sub_seed(cfg.seed, f"expected{p}:{k}"))
            runs.append(unroll(nominal, None, None, default))
        expected = encode_sensor_traces(runs, nominal.bank)
        io.save_primitive(cfg.models / f"primitive{p + 1}.json", nominal, expected)
        data = corrected_dataset(cfg, nominal, expected, p)
        np.savez(cfg.models / f"cdemo_p{p + 1}.npz", ds=data.ds, phase=data.phase, target=data.target, groups=data.groups)
        tcfg = TrainConfig.from_dict({**cfg.pmnn, "seed": sub_seed(cfg.seed, f"pmnn{p}")})
        res = pmnn_train(data, tcfg, bank=nominal.bank)
        io.save_pmnn(cfg.models / f"pmnn_p{p + 1}.json", res.params)
        hist = res.history
        io.write_rows(
            cfg.reports / f"pmnn_p{p + 1}_epochs.csv",
            ["epoch", "train_loss", "train_nmse", "val_nmse", "test_nmse"],
            [[h["epoch"], h["train_loss"], h["train_nmse"], h["val_nmse"], h["test_nmse"]] for h in hist],
        )
        m = {"rows": len(data), "train": res.train_nmse, "val": res.val_nmse, "test": res.test_nmse, "best_epoch": res.best_epoch}
        if cfg.loodo_folds > 0:
            folds = leave_one_demo_out(data, tcfg, demos=list(range(min(cfg.loodo_folds, cfg.n_corrected))))
            io.write_rows(
                cfg.reports / f"loodo_p{p + 1}.csv",
                ["held_out", "train", "validation", "test", "generalization"],
                [[f.held_out, f.train, f.val, f.test, f.generalization] for f in folds],
            )
            m["generalization"] = float(np.mean([f.generalization for f in folds]))
        metrics[f"primitive{p + 1}"] = m
    _log_seeds(cfg, [f"pmnn{p}" for p in cfg.fb_indices] + ["plant"])
    (cfg.reports / "pmnn_metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


def _load_fb_data(cfg: PipelineConfig, p: int) -> FeedbackDataset:
    z = np.load(_require(cfg.models / f"cdemo_p{p + 1}.npz", "learn-fb"))
    return FeedbackDataset(z["ds"], z["phase"], z["target"], z["groups"])


# ---------------------------------------------------------------------------
# phase 3: reinforcement learning on the initially unseen setting
# ---------------------------------------------------------------------------


def run_rl(cfg: PipelineConfig) -> dict:
    """RL on each feedback primitive in turn (primitive 2, then 3)."""
    summary = {}
    for p in cfg.fb_indices:
        nominal, expected = _load_nominal(cfg, p)
        if expected is None:
            raise MissingArtifact(cfg.models / f"primitive{p + 1}.json (expected traces)", "learn-fb")
        pmnn = io.load_pmnn(_require(cfg.models / f"pmnn_p{p + 1}.json", "learn-fb"))
        data = _load_fb_data(cfg, p)
        plant = make_plant(cfg, nominal, p, cfg.rl_setting)
        plant.reseed(sub_seed(cfg.seed, f"rlplant{p}"))
        rcfg = cfg.rl_config(p)
        log_path = cfg.reports / f"rl_p{p + 1}.jsonl"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.unlink(missing_ok=True)
        rcfg = replace(rcfg, log_path=str(log_path), checkpoint_dir=str(cfg.models / f"rl_p{p + 1}"))
        res = rl_feedback(nominal, pmnn, data, expected, None, cfg.J_thr, plant, rcfg)
        io.save_pmnn(cfg.models / f"pmnn_p{p + 1}_rl.json", res.pmnn)
        summary[f"primitive{p + 1}"] = {
            "iterations": res.state.iteration,
            "cost_norms": [h["cost_norm"] for h in res.history],
            "rollouts_per_iter": res.rollouts_per_iter,
            "stalled": res.stalled,
        }
    _log_seeds(cfg, [f"rl{p}" for p in cfg.fb_indices] + [f"rlplant{p}" for p in cfg.fb_indices])
    (cfg.reports / "rl_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# evaluation and single unrolls
# ---------------------------------------------------------------------------


def _models_for(cfg: PipelineConfig, p: int) -> dict:
    models = {"no-fb": None}
    if p in cfg.fb_indices:
        for name, fname in (("fb-before-RL", f"pmnn_p{p + 1}.json"), ("fb-after-RL", f"pmnn_p{p + 1}_rl.json")):
            path = cfg.models / fname
            if path.exists():
                models[name] = io.load_pmnn(path)
    return models


def evaluate_table(cfg: PipelineConfig, primitives=None, settings=None) -> list:
    """Rows ``(primitive, roll_deg, label, column, mean, std)``."""
    rows = []
    prims = cfg.fb_indices if primitives is None else primitives
    settings = testbed.canonical_settings() if settings is None else settings
    for p in prims:
        nominal, expected = _load_nominal(cfg, p)
        models = _models_for(cfg, p)
        if expected is None and len(models) > 1:
            raise MissingArtifact(cfg.models / f"primitive{p + 1}.json (expected traces)", "learn-fb")
        for s in settings:
            plant = make_plant(cfg, nominal, p, s.roll_deg)
            for name, fb in models.items():
                ev = testbed.evaluate_setting(plant, nominal, fb, cfg.eval_runs, expected, sub_seed(cfg.seed, "eval"))
                rows.append((p + 1, s.roll_deg, s.label, name, ev.mean, ev.std))
    return rows


def run_eval(cfg: PipelineConfig) -> Path:
    rows = evaluate_table(cfg)
    columns = ["no-fb", "fb-before-RL", "fb-after-RL"]
    present = [c for c in columns if any(r[3] == c for r in rows)]
    table = {}
    for p, deg, label, name, mean, std in rows:
        table.setdefault((p, deg, label), {})[name] = (mean, std)
    header = ["primitive", "roll_deg", "label"]
    for c in present:
        header += [f"{c}_mean", f"{c}_std"]
    out = []
    for (p, deg, label), vals in table.items():
        row = [p, deg, label]
        for c in present:
            row += list(vals[c])
        out.append(row)
    path = cfg.reports / "eval.csv"
    io.write_rows(path, header, out)
    _log_seeds(cfg, ["eval"])
    return path


def run_unroll(cfg: PipelineConfig, primitive: int, roll_deg: float, model: str = "fb-after-RL", run: int = 0) -> Path:
    """Unroll one primitive (1-based) at one setting and write the trajectory."""
    p = primitive - 1
    nominal, expected = _load_nominal(cfg, p)
    models = _models_for(cfg, p)
    if model not in models:
        phase = "rl" if model == "fb-after-RL" else "learn-fb"
        raise MissingArtifact(cfg.models / f"pmnn_p{primitive}*.json", phase)
    plant = make_plant(cfg, nominal, p, roll_deg)
    plant.reseed(sub_seed(cfg.seed, f"unroll{run}"))
    roll = unroll(nominal, models[model], expected, plant)
    path = cfg.reports / f"unroll_p{primitive}_{roll_deg:g}deg_{model}.csv"
    io.write_rollout(path, roll)
    return path


def run_all(cfg: PipelineConfig) -> Path:
    make_corpus(cfg)
    run_segment(cfg)
    run_learn_dmp(cfg)
    run_learn_fb(cfg)
    run_rl(cfg)
    return run_eval(cfg)
