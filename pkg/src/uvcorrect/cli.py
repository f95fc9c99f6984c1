"""Command-line entry point.

Configuration precedence, lowest to highest: built-in defaults, the JSON
document given with ``--config`` (a run or benchmark manifest is accepted),
then explicit flags. Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure. ``UVCORRECT_WORKERS`` sets the benchmark pool width.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import TRUTH_FACTOR, DataError, load_annotations, load_controls, load_matrix
from .estimation import default_k
from .evaluation import cca_per_feature, eigenspace_cca_curve
from .pipeline import (
    STAGES,
    ConfigError,
    PipelineConfig,
    SuiteConfig,
    _dump,
    atomic_write_text,
    configure_logging,
    exit_code_for,
    load_config_document,
    run_benchmark,
    run_pipeline,
    score_partitions,
    truth_partition,
)
from .synthgen import GeneratorSpec, generate, write_dataset

log = logging.getLogger("uvcorrect")


def _filter_sizes(text):
    if text == "auto":
        return text
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or comma-separated ints, got {text!r}")


def _common(p):
    p.add_argument("--config", help="JSON config or manifest; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log auto resolutions")


def _run_flags(p):
    p.add_argument("--matrix")
    p.add_argument("--annotations")
    p.add_argument("--controls")
    p.add_argument("--method", help="method[+iterative][+sigma]")
    p.add_argument("--k")
    p.add_argument("--nu")
    p.add_argument("--lambda", dest="lam")
    p.add_argument("--restarts", type=int)
    p.add_argument("--filter-sizes", type=_filter_sizes)
    p.add_argument("--n-clusters")
    p.add_argument("--batch-factor", action="append", dest="batch_factors")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uvcorrect", description="Remove unwanted variation and cluster samples."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("correct", help="correct, filter sweep, cluster and score")
    _common(p)
    _run_flags(p)
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")

    p = sub.add_parser("cluster", help="filter sweep and k-means on a matrix as given")
    _common(p)
    _run_flags(p)

    p = sub.add_parser("score", help="clustering error of a partitions file")
    _common(p)
    p.add_argument("--partitions", required=True)
    p.add_argument("--annotations", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _common(p)

    p = sub.add_parser("benchmark", help="designs x methods x seeds on generated data")
    _common(p)
    p.add_argument("--method", action="append", dest="methods",
                   help="restrict to these methods (repeatable)")
    p.add_argument("--restarts", type=int)
    p.add_argument("--filter-sizes", type=_filter_sizes)

    p = sub.add_parser("diagnose", help="control-gene canonical correlation report")
    _common(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--controls", required=True)
    p.add_argument("--k", type=int, help="largest eigen-space dimension (default m/4)")
    return parser


def _config_doc(args):
    if not args.config:
        return {}
    doc = load_config_document(args.config)
    if doc.get("kind") == "run":
        return {"__stages": doc.get("stages"), **doc["config"]}
    return doc


def _need_out(args):
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


def _pipeline_config(args, doc):
    doc = {k: v for k, v in doc.items() if not k.startswith("__")}
    flags = {
        "matrix": args.matrix,
        "annotations": args.annotations,
        "controls": args.controls,
        "k": args.k,
        "nu": args.nu,
        "lambda": args.lam,
        "restarts": args.restarts,
        "filter_sizes": args.filter_sizes,
        "n_clusters": args.n_clusters,
        "batch_factors": args.batch_factors,
        "seed": args.seed,
    }
    for key in ("matrix", "annotations", "controls"):
        if flags[key] is not None:
            flags[key] = os.path.abspath(flags[key])
    if args.matrix is not None:
        doc.pop("generator", None)
    for key in ("k", "n_clusters", "nu", "lambda"):
        v = flags[key]
        if v is not None and v != "auto":
            flags[key] = int(v) if key in ("k", "n_clusters") and v.lstrip("-").isdigit() else v
    if getattr(args, "method", None):
        from .pipeline import parse_method

        method, iterative, sigma = parse_method(args.method)
        flags.update(method=method, iterative=iterative, sigma_variant=sigma)
    doc.update({k: v for k, v in flags.items() if v is not None})
    if "generator" in doc and doc.get("seed") is not None and args.seed is not None:
        doc["generator"] = {**doc["generator"], "seed": args.seed}
    return PipelineConfig.from_dict(doc)


def cmd_correct(args, doc):
    cfg = _pipeline_config(args, doc)
    out = _need_out(args)
    if args.stages:
        stages = tuple(s.strip() for s in args.stages.split(","))
    else:
        stages = tuple(doc.get("__stages") or STAGES)
    st = run_pipeline(cfg, out, stages=stages)
    for size, err in st.scores:
        print(f"n_genes_kept={size} error={err:.4f}")
    return 0


def cmd_cluster(args, doc):
    cfg = _pipeline_config(args, doc)
    if cfg.method != "none":
        raise ConfigError("cluster runs on the matrix as given; use 'correct' for methods")
    run_pipeline(cfg, _need_out(args), stages=("cluster",))
    return 0


def cmd_score(args, doc):
    scores = score_partitions(args.partitions, args.annotations, _need_out(args))
    for size, err in sorted(scores, reverse=True):
        print(f"n_genes_kept={size} error={err:.4f}")
    return 0


def cmd_generate(args, doc):
    doc = dict(doc.get("generator", doc))
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = GeneratorSpec(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generator: {exc}") from None
    for path in write_dataset(generate(spec), _need_out(args)):
        print(path)
    return 0


def cmd_benchmark(args, doc):
    if not doc:
        raise ConfigError("benchmark needs --config with designs, methods and seeds")
    suite = SuiteConfig.from_dict(doc)
    data = suite.to_dict()
    if args.methods:
        data["methods"] = args.methods
    if args.seed is not None:
        data["seeds"] = [args.seed]
    base = dict(data["base"])
    if args.restarts is not None:
        base["restarts"] = args.restarts
    if args.filter_sizes is not None:
        base["filter_sizes"] = args.filter_sizes
    data["base"] = base
    suite = SuiteConfig.from_dict(data)
    summary = run_benchmark(suite, _need_out(args))
    for row in summary:
        med = "failed" if row["median"] is None else f"{row['median']:.3f}"
        print(f"{row['design']:>20} {row['method']:<28} median={med} n={row['n']}")
    return 0


def cmd_diagnose(args, doc):
    y = load_matrix(args.matrix)
    ann = load_annotations(args.annotations)
    ann.validate(y)
    controls = load_controls(args.controls, y)
    if not ann.has(TRUTH_FACTOR):
        raise DataError(f"{args.annotations}: diagnose needs a {TRUTH_FACTOR} annotation")
    x = truth_partition(ann, y.sample_ids).membership()
    cca = cca_per_feature(y, x)
    ctl = np.asarray(controls.indices)
    mask = np.zeros(y.shape[1], dtype=bool)
    mask[ctl] = True
    k_max = args.k or min(default_k(y.shape[0]), y.shape[0])
    report = {
        "n_controls": int(mask.sum()),
        "cca_controls_median": float(np.median(cca[mask])),
        "cca_others_median": float(np.median(cca[~mask])) if (~mask).any() else None,
        "eigenspace_controls": eigenspace_cca_curve(y, ctl, x, k_max).tolist(),
        "eigenspace_all": eigenspace_cca_curve(y, range(y.shape[1]), x, k_max).tolist(),
    }
    out = _need_out(args)
    atomic_write_text(out / "diagnose.json", _dump(report))
    lines = ["feature_id,is_control,cca"]
    lines += [f"{f},{int(c)},{v!r}" for f, c, v in zip(y.feature_ids, mask, cca.tolist())]
    atomic_write_text(out / "cca_per_feature.csv", "\n".join(lines) + "\n")
    print(json.dumps({k: v for k, v in report.items() if not k.startswith("eigen")}))
    return 0


COMMANDS = {
    "correct": cmd_correct,
    "cluster": cmd_cluster,
    "score": cmd_score,
    "generate": cmd_generate,
    "benchmark": cmd_benchmark,
    "diagnose": cmd_diagnose,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    configure_logging(args.verbose)
    try:
        doc = _config_doc(args)
        return COMMANDS[args.command](args, doc)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code_for(exc)
        stage = f" [{exc.stage}]" if hasattr(exc, "stage") else ""
        print(f"uvcorrect {args.command}{stage}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
