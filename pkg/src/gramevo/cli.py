"""Command-line entry point.

Commands: search, eval-correlation, transfer-eval, augment, encode,
fit-surrogate.  All outputs are JSON or JSON-lines, written atomically via a
.partial suffix.  Exit codes: 0 ok, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import sys

import numpy as np

from . import __version__
from .augment import expand_dataset
from .compiler import TensorShape
from .dataset import (
    DatasetRow,
    atomic_write_lines,
    atomic_write_text,
    featurize_rows,
    read_dataset,
    write_dataset,
)
from .encoder import encode_plain, encode_with_shapes, parse_arch
from .errors import ConfigError, GramevoError, ShapeError
from .evaluator import build_evaluator
from .evolution import (
    SURROGATE_EXTERNAL,
    SURROGATE_FOREST,
    SearchConfig,
    run_search,
)
from .grammar import default_grammar, load_grammar_file, sample_tree
from .metrics import correlation_report
from .surrogate import (
    NONE,
    TrainingRow,
    TrainingSet,
    fit_forest,
    normalize_merge,
)

WORKER_ENV_VAR = "GRAMEVO_WORKER_CMD"


def _resolve_grammar(ref: str):
    if ref == "default":
        return default_grammar(), "default"
    return load_grammar_file(ref), ref


def _parse_shape(text: str) -> TensorShape:
    parts = [p.strip() for p in text.split(",")]
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"input_shape {text!r} must be comma-separated integers")
    if len(dims) == 3:
        return TensorShape.im(*dims)
    if len(dims) == 2:
        return TensorShape.col(*dims)
    raise ConfigError(f"input_shape {text!r} needs 2 (col) or 3 (im) dims")


def _shape_from_config(value) -> TensorShape:
    if isinstance(value, str):
        return _parse_shape(value)
    if isinstance(value, list):
        return _parse_shape(",".join(str(v) for v in value))
    if isinstance(value, dict):
        dims = value.get("dims", [])
        return TensorShape(value.get("mode", "im"), tuple(dims))
    raise ConfigError(f"input_shape {value!r} not understood")


def _worker_command(args, config_surrogate: dict) -> list[str] | None:
    if getattr(args, "worker_cmd", None):
        return shlex.split(args.worker_cmd)
    env_cmd = os.environ.get(WORKER_ENV_VAR)
    if env_cmd:
        return shlex.split(env_cmd)
    cmd = config_surrogate.get("worker_cmd")
    if cmd is not None and not isinstance(cmd, list):
        raise ConfigError("surrogate.worker_cmd must be a list of strings")
    return cmd


def _load_warm_start(paths) -> TrainingSet | None:
    if not paths:
        return None
    rows = []
    for path in paths:
        for row in read_dataset(path):
            rows.append(TrainingRow(row.encoding, row.accuracy, row.dataset))
    return TrainingSet(rows=rows)


# -- search ---------------------------------------------------------------


def _search_config_from(doc: dict, args) -> SearchConfig:
    raw = dict(doc.get("search", {}))
    surrogate = dict(doc.get("surrogate", {}))
    known = {
        "population_size", "n_candidates", "k", "tournament_size", "iterations",
        "refit_interval", "mode", "k_final", "max_depth", "mutation_retries",
        "candidate_retries",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"search.{sorted(unknown)[0]} is not a recognised field")
    cfg = SearchConfig(
        surrogate=surrogate.get("kind", "none"),
        seed=doc.get("seed", 0),
        normalization=doc.get("normalization", "none"),
        n_trees=surrogate.get("n_trees", 100),
        min_samples_leaf=surrogate.get("min_samples_leaf", 1),
        encoding_variant=surrogate.get("encoding_variant", "with_shapes"),
        drop_zero_rows=surrogate.get("drop_zero_rows", False),
        **raw,
    )
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    cfg.validate()
    return cfg


def cmd_search(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc.msg}")
    cfg = _search_config_from(doc, args)
    grammar, grammar_ref = _resolve_grammar(doc.get("grammar", "default"))
    input_shape = _shape_from_config(doc.get("input_shape", [3, 32, 32]))
    if "evaluator" not in doc:
        raise ConfigError("evaluator: missing section")
    evaluator = build_evaluator(doc["evaluator"], grammar, input_shape)
    warm = _load_warm_start(doc.get("warm_start"))
    worker_cmd = _worker_command(args, doc.get("surrogate", {}))

    result = run_search(cfg, grammar, evaluator, input_shape,
                        warm_start=warm, worker_cmd=worker_cmd)

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, args.log)
    atomic_write_lines(
        log_path, (json.dumps(r.to_json_obj()) for r in result.records)
    )
    atomic_write_text(
        os.path.join(out_dir, args.summary),
        json.dumps(result.summary_obj(), indent=2) + "\n",
    )
    manifest = {
        "package_version": __version__,
        "grammar": grammar_ref,
        "input_shape": {"mode": input_shape.mode, "dims": list(input_shape.dims)},
        "seed": cfg.seed,
        "search": {
            "population_size": cfg.population_size,
            "n_candidates": cfg.n_candidates,
            "k": cfg.k,
            "tournament_size": cfg.tournament_size,
            "iterations": cfg.iterations,
            "refit_interval": cfg.resolved_refit_interval(),
            "mode": cfg.mode,
            "k_final": cfg.k_final,
            "max_depth": cfg.max_depth,
        },
        "surrogate": {
            "kind": cfg.surrogate,
            "n_trees": cfg.n_trees,
            "min_samples_leaf": cfg.min_samples_leaf,
            "encoding_variant": cfg.encoding_variant,
            "drop_zero_rows": cfg.drop_zero_rows,
        },
        "normalization": cfg.normalization,
        "evaluator": evaluator.manifest(),
        "warm_start": doc.get("warm_start") or [],
    }
    atomic_write_text(
        os.path.join(out_dir, args.manifest), json.dumps(manifest, indent=2) + "\n"
    )
    print(json.dumps(result.summary_obj()))
    return 0


# -- eval-correlation ------------------------------------------------------


def _forest_fit_predict(grammar, input_shape, train_rows, eval_rows, *,
                        normalization, n_trees, min_samples_leaf, seed,
                        use_extra, drop_zero):
    feat_train, skipped_train = featurize_rows(
        grammar, input_shape, train_rows, use_extra=use_extra
    )
    feat_eval, skipped_eval = featurize_rows(
        grammar, input_shape, eval_rows, use_extra=use_extra
    )
    rows = [
        TrainingRow(fv, row.accuracy, row.dataset)
        for fv, row in feat_train
        if not (drop_zero and row.accuracy == 0.0)
    ]
    if len(rows) < 2:
        raise ConfigError("train split has fewer than 2 usable rows")
    if not feat_eval:
        raise ConfigError("eval split has no usable rows")
    data = TrainingSet(rows=rows)
    if normalization != NONE:
        data = normalize_merge(data, normalization)
    model = fit_forest(data, n_trees=n_trees, min_samples_leaf=min_samples_leaf, rng=seed)
    preds = model.predict([fv for fv, _ in feat_eval])
    truths = [row.accuracy for _, row in feat_eval]
    return preds, truths, len(skipped_train) + len(skipped_eval)


def _external_fit_predict(grammar, train_rows, eval_rows, *, normalization,
                          worker_cmd, drop_zero):
    from .bridge import BridgeClient

    if not worker_cmd:
        raise ConfigError("surrogate external requires --worker-cmd or config/env")
    rows = [
        TrainingRow(row.encoding, row.accuracy, row.dataset)
        for row in train_rows
        if not (drop_zero and row.accuracy == 0.0)
    ]
    if len(rows) < 2:
        raise ConfigError("train split has fewer than 2 usable rows")
    data = TrainingSet(rows=rows)
    if normalization != NONE:
        data = normalize_merge(data, normalization)
    with BridgeClient(worker_cmd) as client:
        client.fit([(r.x, r.y) for r in data.rows])
        preds = client.predict([row.encoding for row in eval_rows])
    truths = [row.accuracy for row in eval_rows]
    return preds, truths, 0


def _fit_predict(args, grammar, input_shape, train_rows, eval_rows):
    if args.surrogate == SURROGATE_FOREST:
        return _forest_fit_predict(
            grammar, input_shape, train_rows, eval_rows,
            normalization=args.normalization, n_trees=args.n_trees,
            min_samples_leaf=args.min_samples_leaf, seed=args.seed,
            use_extra=not args.no_extra_features, drop_zero=args.drop_zero,
        )
    if args.surrogate == SURROGATE_EXTERNAL:
        return _external_fit_predict(
            grammar, train_rows, eval_rows,
            normalization=args.normalization,
            worker_cmd=_worker_command(args, {}),
            drop_zero=args.drop_zero,
        )
    raise ConfigError(f"surrogate {args.surrogate!r} is not forest|external")


def cmd_eval_correlation(args) -> int:
    grammar, _ = _resolve_grammar(args.grammar)
    input_shape = _parse_shape(args.input_shape)
    test_rows = read_dataset(args.test)
    extra_train = []
    for path in args.train:
        if os.path.abspath(path) == os.path.abspath(args.test) and args.train_prefix is not None:
            continue  # the prefix of the test file is the in-distribution train part
        extra_train.extend(read_dataset(path))

    windows = []
    if args.train_prefix is not None:
        prefix = args.train_prefix
        if not 0 < prefix < len(test_rows):
            raise ConfigError("--train-prefix must split the test file")
        limit = len(test_rows)
        if args.eval_window is not None:
            limit = min(limit, prefix + args.eval_window)
        step = args.refit_every or (limit - prefix)
        preds, truths = [], []
        skipped = 0
        start = prefix
        while start < limit:
            stop = min(start + step, limit)
            p, t, s = _fit_predict(
                args, grammar, input_shape,
                extra_train + test_rows[:start], test_rows[start:stop],
            )
            preds.extend(p)
            truths.extend(t)
            skipped += s
            report = correlation_report(t, p) if len(t) >= 2 else None
            windows.append(
                {
                    "start": start,
                    "stop": stop,
                    "kendall": None if report is None or report.degenerate else report.kendall,
                    "spearman": None if report is None or report.degenerate else report.spearman,
                }
            )
            start = stop
    else:
        if not extra_train:
            raise ConfigError("--train is required (or use --train-prefix)")
        preds, truths, skipped = _fit_predict(
            args, grammar, input_shape, extra_train, test_rows
        )

    report = correlation_report(truths, preds)
    out = json.loads(report.to_json())
    out["skipped_rows"] = skipped
    if args.refit_every:
        out["windows"] = windows
    text = json.dumps(out, indent=2)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def cmd_transfer_eval(args) -> int:
    grammar, _ = _resolve_grammar(args.grammar)
    input_shape = _parse_shape(args.input_shape)
    rows = []
    for path in args.data:
        rows.extend(read_dataset(path))
    tags = sorted({row.dataset for row in rows})
    if len(tags) < 2:
        raise ConfigError("--data must cover at least 2 dataset tags for leave-one-out")
    results = {}
    for tag in tags:
        train = [r for r in rows if r.dataset != tag]
        held = [r for r in rows if r.dataset == tag]
        preds, truths, skipped = _fit_predict(args, grammar, input_shape, train, held)
        report = correlation_report(truths, preds)
        results[tag] = json.loads(report.to_json())
        results[tag]["skipped_rows"] = skipped
    text = json.dumps(results, indent=2)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


# -- augment / encode / fit-surrogate ---------------------------------------


def cmd_augment(args) -> int:
    grammar, _ = _resolve_grammar(args.grammar)
    rows = read_dataset(args.input)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    out_rows = []
    for row in rows:
        tree = parse_arch(grammar, row.encoding)
        for sample in expand_dataset(grammar, [(tree, row.accuracy)], args.factor, rng):
            out_rows.append(
                DatasetRow(
                    encoding=encode_plain(grammar, sample.tree).text,
                    accuracy=sample.accuracy,
                    dataset=row.dataset,
                    extra_features=row.extra_features if sample.source_kind is None else None,
                )
            )
    write_dataset(args.output, out_rows)
    print(f"wrote {len(out_rows)} rows ({len(rows)} originals) to {args.output}")
    return 0


def cmd_encode(args) -> int:
    grammar, _ = _resolve_grammar(args.grammar)
    input_shape = _parse_shape(args.input_shape)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    lines = []
    attempts = 0
    while len(lines) < args.count:
        attempts += 1
        if attempts > max(100 * args.count, 100):
            raise GramevoError("too many samples failed shape checking")
        tree = sample_tree(grammar, args.max_depth, rng)
        if args.variant == "with-shapes":
            try:
                lines.append(encode_with_shapes(grammar, tree, input_shape).text)
            except ShapeError:
                continue  # the annotated variant only exists for valid networks
        else:
            lines.append(encode_plain(grammar, tree).text)
    if args.out:
        atomic_write_lines(args.out, lines)
    else:
        for line in lines:
            print(line)
    return 0


def cmd_fit_surrogate(args) -> int:
    grammar, _ = _resolve_grammar(args.grammar)
    input_shape = _parse_shape(args.input_shape)
    rows = []
    for path in args.train:
        rows.extend(read_dataset(path))
    featurized, skipped = featurize_rows(
        grammar, input_shape, rows, use_extra=not args.no_extra_features
    )
    data = TrainingSet(
        rows=[
            TrainingRow(fv, row.accuracy, row.dataset)
            for fv, row in featurized
            if not (args.drop_zero and row.accuracy == 0.0)
        ]
    )
    if args.normalization != NONE:
        data = normalize_merge(data, args.normalization)
    model = fit_forest(
        data, n_trees=args.n_trees, min_samples_leaf=args.min_samples_leaf, rng=args.seed
    )
    atomic_write_text(args.out, model.to_json())
    print(f"fitted on {len(data.rows)} rows ({len(skipped)} skipped); model at {args.out}")
    return 0


# -- argument parsing -------------------------------------------------------


def _add_common_surrogate_args(p) -> None:
    p.add_argument("--surrogate", default="forest", help="forest or external")
    p.add_argument("--normalization", default="none",
                   help="none, minmax or percentile (per dataset tag)")
    p.add_argument("--grammar", default="default")
    p.add_argument("--input-shape", default="3,32,32")
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--worker-cmd", help="external worker command line")
    p.add_argument("--drop-zero", action="store_true",
                   help="drop zero-accuracy rows from training")
    p.add_argument("--no-extra-features", action="store_true",
                   help="ignore extra_features columns")
    p.add_argument("--out", help="also write the JSON report to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gramevo",
        description="Surrogate-assisted regularized evolution over a "
                    "grammar-defined architecture space.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run one evolution search from a config file")
    p.add_argument("config")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--log", default="run.jsonl")
    p.add_argument("--summary", default="summary.json")
    p.add_argument("--manifest", default="manifest.json")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--iterations", type=int, help="override the iteration count")
    p.add_argument("--worker-cmd", help="external worker command line")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval-correlation",
                       help="fit on train rows, predict test rows, report rank correlations")
    p.add_argument("--train", nargs="*", default=[])
    p.add_argument("--test", required=True)
    p.add_argument("--train-prefix", type=int,
                   help="in-distribution protocol: train on the first N test-file rows")
    p.add_argument("--eval-window", type=int,
                   help="evaluate only this many rows after the prefix")
    p.add_argument("--refit-every", type=int,
                   help="slide the split, refitting every N rows")
    _add_common_surrogate_args(p)
    p.set_defaults(func=cmd_eval_correlation)

    p = sub.add_parser("transfer-eval",
                       help="leave-one-out over dataset tags")
    p.add_argument("--data", nargs="+", required=True)
    _add_common_surrogate_args(p)
    p.set_defaults(func=cmd_transfer_eval)

    p = sub.add_parser("augment", help="expand a dataset with rewrite augmentations")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--factor", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grammar", default="default")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("encode", help="sample architectures and print their encodings")
    p.add_argument("--grammar", default="default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--variant", choices=["plain", "with-shapes"], default="plain")
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--input-shape", default="3,32,32")
    p.add_argument("--out")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("fit-surrogate", help="fit a forest on dataset files and serialize it")
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grammar", default="default")
    p.add_argument("--input-shape", default="3,32,32")
    p.add_argument("--normalization", default="none")
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drop-zero", action="store_true")
    p.add_argument("--no-extra-features", action="store_true")
    p.set_defaults(func=cmd_fit_surrogate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except GramevoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
