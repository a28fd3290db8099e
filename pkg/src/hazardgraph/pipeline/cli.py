"""``hazardgraph`` command line.

Exit codes: 0 success, 1 finished with per-item failures, 2 fatal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from ..errors import AuthFailure, ConfigError, HazardGraphError
from .config import SHUFFLE_MODES, build_config, parse_backend_flags
from .stages import Pipeline, StageResult

logger = logging.getLogger("hazardgraph")

EXIT_OK, EXIT_ITEM_FAILURES, EXIT_FATAL = 0, 1, 2


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="TOML or JSON settings file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--cache-dir", default=default, help="backend response cache")
    parser.add_argument("--workdir", default=default, help="stage output directory")
    parser.add_argument("--backend", action="append", default=default, metavar="CAP=NAME",
                        help="capability (chat, embed, image, vqa) to backend name; repeatable")
    parser.add_argument("--generator", action="append", default=default, metavar="NAME",
                        help="image backend to compare; repeatable")
    parser.add_argument("--force", action="store_true", default=default,
                        help="recompute stages even when their outputs are current")
    parser.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hazardgraph", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    def cluster_flags(p):
        p.add_argument("--min-cluster-size", type=int)
        p.add_argument("--min-samples", type=int)
        p.add_argument("--allow-single-cluster", action="store_true", default=None)

    def generate_flags(p):
        p.add_argument("--cluster-id", type=int)
        p.add_argument("--max-scenes", type=int)

    def score_flags(p):
        p.add_argument("--lambda", dest="lambda_node", type=float, help="hazard node weight")
        p.add_argument("--gamma", dest="gamma_edge", type=float, help="hazard edge weight")

    def analyze_flags(p):
        p.add_argument("--shuffle", action="append", choices=SHUFFLE_MODES,
                       help="negative control to run; repeatable")
        p.add_argument("--image-pool", help="directory of unrelated images for out_of_domain")
        p.add_argument("--bins", type=int)

    p = verb("classify", "classify narratives from a CSV export")
    p.add_argument("csv")
    p.add_argument("--strict", action="store_true")

    p = verb("cluster", "embed and cluster preventable-hazard rationales")
    p.add_argument("--embeddings", help="precomputed N x m matrix (.npy or .json)")
    cluster_flags(p)

    p = verb("generate", "scene graphs, prompts and images for one cluster")
    generate_flags(p)

    p = verb("score", "VQA graph score plus embedding and match baselines")
    score_flags(p)

    p = verb("analyze", "negative controls, entropy and the report bundle")
    analyze_flags(p)

    p = verb("run-all", "every stage from CSV to report")
    p.add_argument("csv")
    p.add_argument("--strict", action="store_true")
    for add in (cluster_flags, generate_flags, score_flags, analyze_flags):
        add(p)
    return parser


def config_from_args(args: argparse.Namespace):
    overrides = {
        "seed": args.seed,
        "cache_dir": args.cache_dir,
        "workdir": args.workdir,
        "backends": parse_backend_flags(args.backend),
        "generators": tuple(args.generator) if args.generator else None,
    }
    for name in ("min_cluster_size", "min_samples", "allow_single_cluster", "cluster_id",
                 "max_scenes", "lambda_node", "gamma_edge", "image_pool", "bins"):
        overrides[name] = getattr(args, name, None)
    shuffles = getattr(args, "shuffle", None)
    if shuffles:
        overrides["shuffles"] = tuple(dict.fromkeys(shuffles))
    return build_config(args.config, overrides)


def _report(results: Sequence[StageResult]) -> int:
    failures = 0
    for r in results:
        state = "reused" if r.reused else "done"
        print(f"{r.artifact.stage:9s} {state:6s} {r.artifact.content_hash[:16]}  "
              f"failures={r.failures}  {r.directory}")
        failures += r.failures
    return EXIT_ITEM_FAILURES if failures else EXIT_OK


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        pipe = Pipeline(cfg, force=bool(args.force))
        if args.verb == "classify":
            results = [pipe.classify(args.csv, strict=args.strict)]
        elif args.verb == "cluster":
            results = [pipe.cluster(args.embeddings)]
        elif args.verb == "generate":
            results = [pipe.generate()]
        elif args.verb == "score":
            results = [pipe.score()]
        elif args.verb == "analyze":
            results = [pipe.analyze()]
        else:
            results = pipe.run_all(args.csv, strict=args.strict)
    except AuthFailure as exc:
        print(f"error: authentication: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (ConfigError, HazardGraphError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    return _report(results)


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv))
