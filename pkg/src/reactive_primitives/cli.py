"""Command line entry point: ``reactive-primitives <command> [options]``.

Commands run one pipeline phase each and hand off through files under
``--out``; ``run-all`` chains them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .io import FormatError
from .segmentation import SegmentationError

EXIT_SEGMENTATION = 1
EXIT_MISSING = 3
EXIT_FORMAT = 4

log = logging.getLogger("reactive_primitives")


def _config(args) -> pipeline.PipelineConfig:
    overrides = {"seed": args.seed, "out": args.out}
    if args.config:
        return pipeline.PipelineConfig.load(args.config, **overrides)
    if args.seed is None:
        raise ValueError("a seed is required (--seed or a config file)")
    return pipeline.PipelineConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _segment(cfg, args) -> int:
    report = pipeline.run_segment(cfg)
    n = report["n_failures"]
    print(f"segmented {len(report['segments'][0])} demos, {n} failures -> {cfg.segments}")
    if n and not args.lenient:
        for a in report["alignments"]:
            if a["error"]:
                print(f"  {a['demo']} primitive {a['primitive']}: {a['error']}", file=sys.stderr)
        return EXIT_SEGMENTATION
    return 0


def _make_corpus(cfg, args) -> int:
    recs = pipeline.make_corpus(cfg)
    print(f"wrote {len(recs)} demos -> {cfg.demos}")
    return 0


def _learn_dmp(cfg, args) -> int:
    noms = pipeline.run_learn_dmp(cfg)
    print(f"fitted {len(noms)} primitives -> {cfg.models}")
    return 0


def _learn_fb(cfg, args) -> int:
    print(json.dumps(pipeline.run_learn_fb(cfg), indent=1, sort_keys=True))
    return 0


def _rl(cfg, args) -> int:
    print(json.dumps(pipeline.run_rl(cfg), indent=1, sort_keys=True))
    return 0


def _unroll(cfg, args) -> int:
    print(pipeline.run_unroll(cfg, args.primitive, args.setting, args.model, args.run))
    return 0


def _eval(cfg, args) -> int:
    print(pipeline.run_eval(cfg).read_text(), end="")
    return 0


def _run_all(cfg, args) -> int:
    pipeline.make_corpus(cfg)
    rc = _segment(cfg, args)
    if rc:
        return rc
    pipeline.run_learn_dmp(cfg)
    pipeline.run_learn_fb(cfg)
    pipeline.run_rl(cfg)
    return _eval(cfg, args)


COMMANDS = {
    "make-corpus": (_make_corpus, "write the synthetic demonstration corpus"),
    "segment": (_segment, "segment the demos into primitives"),
    "learn-dmp": (_learn_dmp, "fit the nominal orientation primitives"),
    "learn-fb": (_learn_fb, "train feedback models on corrected demos"),
    "rl": (_rl, "refine the feedback models on the unseen setting"),
    "unroll": (_unroll, "unroll one primitive on one setting"),
    "eval": (_eval, "cost table over all settings"),
    "run-all": (_run_all, "every phase in order"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output root (overrides the config)")
    common.add_argument("--lenient", action="store_true", help="do not fail on per-demo segmentation errors")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="reactive-primitives", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "unroll":
            p.add_argument("--primitive", type=int, default=2, choices=(1, 2, 3))
            p.add_argument("--setting", type=float, default=10.0, help="roll in degrees")
            p.add_argument("--model", default="fb-after-RL", choices=("no-fb", "fb-before-RL", "fb-after-RL"))
            p.add_argument("--run", type=int, default=0, help="noise realization")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command][0](cfg, args)
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FormatError, SegmentationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
