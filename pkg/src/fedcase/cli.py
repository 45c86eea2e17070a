"""``fedcase`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 configuration error, 2 missing or corrupt files,
3 numeric or state error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__, pipeline
from .config import load_config
from .errors import ConfigError, FedcaseError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STATE = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of dotted keys (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="run directory (overrides the config's out)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    ap = argparse.ArgumentParser(prog="fedcase", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fedcase {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write per-site dataset files and the manifest")
    tr = sub.add_parser("train", parents=[common], help="train the federated or centralized model")
    tr.add_argument("--mode", choices=pipeline.MODES, default="federated")
    sub.add_parser("fit-generators", parents=[common], help="fit one generator per client")
    sub.add_parser("sample-pool", parents=[common], help="sample the synthetic explanation pool")
    ex = sub.add_parser("explain", parents=[common], help="retrieve and score explanations for OOD queries")
    ex.add_argument("--negatives", type=int, help="number of negative queries")
    ex.add_argument("--positives", type=int, help="number of positive queries")
    sub.add_parser("report", parents=[common], help="write the classification report")
    sub.add_parser("run", parents=[common], help="every stage in order")
    return ap


def _run(args) -> dict | None:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    if args.command == "explain" and (args.negatives is not None or args.positives is not None):
        from dataclasses import replace
        cfg = replace(cfg, n_negative=cfg.n_negative if args.negatives is None else args.negatives,
                      n_positive=cfg.n_positive if args.positives is None else args.positives)
    if args.command == "gen-data":
        return {"files": [str(p) for p in pipeline.gen_data(cfg)]}
    if args.command == "train":
        _, records = pipeline.train(cfg, args.mode)
        best = max((r for r in records if r.is_best), key=lambda r: r.round)
        return {"mode": args.mode, "best_round": best.round, "best_f1_weighted": best.f1_weighted}
    if args.command == "fit-generators":
        return {"files": [str(p) for p in pipeline.fit_generators(cfg)]}
    if args.command == "sample-pool":
        return {"pool_size": len(pipeline.sample_explanation_pool(cfg))}
    if args.command == "explain":
        ev = pipeline.explain(cfg)
        return {k: ev[k] for k in ("n_queries", "mean_ndcg_feature", "mean_ndcg_ssim", "feature_wins")}
    if args.command == "report":
        return pipeline.report(cfg)
    if args.command == "run":
        out = pipeline.run_all(cfg)
        ev = out["evaluation"]
        return {"classification": out["classification"],
                "mean_ndcg_feature": ev["mean_ndcg_feature"], "mean_ndcg_ssim": ev["mean_ndcg_ssim"]}
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = _run(args)
    except ConfigError as exc:
        print(f"fedcase: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"fedcase: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FedcaseError as exc:
        print(f"fedcase: {exc}", file=sys.stderr)
        return EXIT_STATE
    if summary is not None:
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
