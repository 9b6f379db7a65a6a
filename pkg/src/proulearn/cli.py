"""Command-line entry point.

Every subcommand prints one JSON object per line on stdout and logs to
stderr. Exit codes: 0 success, 2 bad arguments, 3 I/O or format error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from proulearn.adapt import AdaptConfig, adapt_target
from proulearn.bench import BENCH_ADAPT, STRATEGIES, SynthSpec, generate_shifted_domains, linear_probe_gap, run_benchmark
from proulearn.correlation import METRICS, dump_knn_csv, knn_by_correlation, neighbor_entropy, self_entropy
from proulearn.data_io import FormatError, load_features, load_labels, save_features, save_labels, softmax
from proulearn.hpe import build_ensemble, homogeneity_scores
from proulearn.mmd import KERNELS, mmd_to_centroids
from proulearn.netmodel import DivergenceError, PretrainConfig, accuracy, forward, load_model, pretrain_source, save_model
from proulearn.pseudolabel import compute_centroids
from proulearn.selection import ActiveSet, select_active, selection_scores

logger = logging.getLogger("proulearn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required argument(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _load_x(args, path):
    return load_features(path, format=args.format, csv_header=args.csv_header, min_cols=1)


def _adapt_config(args, base: AdaptConfig) -> AdaptConfig:
    cfg = replace(
        base,
        epochs=args.epochs if args.epochs is not None else base.epochs,
        batch_size=args.batch_size if args.batch_size is not None else base.batch_size,
        budget_fraction=args.budget if args.budget is not None else base.budget_fraction,
        g=args.trees if args.trees is not None else base.g,
        k=args.k if args.k is not None else base.k,
        subsample_size=args.subsample if args.subsample is not None else base.subsample_size,
        lr_backbone=args.lr if args.lr is not None else base.lr_backbone,
        momentum=args.momentum if args.momentum is not None else base.momentum,
        metric=args.metric or base.metric,
        mmd_kernel=args.mmd_kernel or base.mmd_kernel,
        depth_basis=args.depth_basis or base.depth_basis,
        seed=args.seed,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    _require(args, "features", "labels", "out_model")
    cfg = PretrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        label_smoothing=args.label_smoothing,
        hidden=args.hidden,
        embed_dim=args.embed_dim,
        seed=args.seed,
    )
    if cfg.epochs < 1 or cfg.batch_size < 1 or cfg.lr <= 0 or not 0 <= cfg.label_smoothing < 1:
        raise UsageError("epochs and batch size must be >= 1, lr > 0 and label smoothing in [0, 1)")
    X = _load_x(args, args.features)
    y, M = load_labels(args.labels, format=args.format)
    if y.size != X.shape[0]:
        raise UsageError(f"{y.size} labels for {X.shape[0]} feature rows")
    model = pretrain_source(X, y, M, cfg)
    save_model(model, args.out_model)
    _emit({"command": "pretrain", "out_model": str(args.out_model), "train_accuracy": accuracy(model, X, y)})
    return EXIT_OK


def cmd_select(args) -> int:
    _require(args, "features", "model", "out")
    model = load_model(args.model)
    X = _load_x(args, args.features)
    if not 0 < args.budget <= 1:
        raise UsageError("--budget must lie in (0, 1]")
    if args.trees < 1 or args.k < 0:
        raise UsageError("--trees must be >= 1 and --k >= 0")
    if X.shape[1] != model.d_in:
        raise UsageError(f"model expects {model.d_in} features, got {X.shape[1]}")
    if args.k >= X.shape[0]:
        raise UsageError(f"--k must be below the sample count {X.shape[0]}")
    oracle = None
    if args.labels_oracle is not None:
        oracle, _ = load_labels(args.labels_oracle, format=args.format)
        if oracle.size != X.shape[0]:
            raise UsageError(f"{oracle.size} oracle labels for {X.shape[0]} rows")

    emb, logits = forward(model, X)
    probs = softmax(logits)
    ens = build_ensemble(emb, g=args.trees, subsample_size=args.subsample, seed=args.seed, depth_basis=args.depth_basis)
    h = homogeneity_scores(ens, emb)
    if args.k > 0:
        graph = knn_by_correlation(emb, args.k, metric=args.metric)
        e = neighbor_entropy(graph, probs)
    else:
        graph = None
        e = self_entropy(probs)
    u = selection_scores(h, e)
    active = select_active(u, graph, args.budget, oracle)
    meta = {"trees": args.trees, "k": args.k, "seed": args.seed, "n": int(X.shape[0]), "metric": args.metric}
    active.save_json(args.out, metadata=meta)
    if args.dump_knn and graph is not None:
        dump_knn_csv(graph, args.dump_knn)
    if args.dump_scores:
        with open(args.dump_scores, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_index", "h_raw", "h_norm", "e_raw", "e_norm", "u"])
            for i in range(X.shape[0]):
                w.writerow([i] + [repr(float(v[i])) for v in (h.raw, h.normalized, e.raw, e.normalized, u.u)])
    out = {"command": "select", "out": str(args.out), "selected": int(active.indices.size), **meta}
    if active.warning:
        out["warning"] = active.warning
    _emit(out)
    return EXIT_OK


def cmd_adapt(args) -> int:
    _require(args, "features", "model", "labels", "out_model")
    cfg = _adapt_config(args, AdaptConfig())
    cfg = replace(
        cfg,
        ablate_cc=args.ablate_cc,
        freeze_classifier=args.freeze_classifier,
        refresh_hpe=args.refresh_hpe,
        refine=not args.no_refine,
    )
    model = load_model(args.model)
    X = _load_x(args, args.features)
    y, _ = load_labels(args.labels, format=args.format)
    if y.size != X.shape[0]:
        raise UsageError(f"{y.size} labels for {X.shape[0]} feature rows")
    if X.shape[1] != model.d_in:
        raise UsageError(f"model expects {model.d_in} features, got {X.shape[1]}")
    if cfg.k >= X.shape[0]:
        raise UsageError(f"--k must be below the sample count {X.shape[0]}")
    active = ActiveSet.load_json(args.active) if args.active else None
    if args.dump_pseudo:
        Path(args.dump_pseudo).unlink(missing_ok=True)
    adapted, report = adapt_target(model, X, y, cfg, active=active, pseudo_dump=args.dump_pseudo)
    save_model(adapted, args.out_model)
    report.model_path = str(args.out_model)
    if args.report:
        report.save_json(args.report)
    if args.epoch_csv:
        report.save_csv(args.epoch_csv)
    for r in report.epochs:
        _emit({"command": "adapt", "epoch": r.epoch, "l_total": r.l_total, "target_acc": r.target_acc})
    _emit({
        "command": "adapt",
        "out_model": str(args.out_model),
        "source_target_acc": report.source_target_acc,
        "final_target_acc": report.final_target_acc,
        "selected": int(report.active.indices.size),
    })
    return EXIT_OK


def _bench_spec(args) -> SynthSpec:
    spec = SynthSpec.from_json(args.spec) if args.spec else SynthSpec()
    inline = {
        "num_classes": args.num_classes,
        "dim": args.dim,
        "rotation_deg": args.rotation_deg,
        "translation": args.translation,
        "noise_sigma": args.noise_sigma,
        "outlier_fraction": args.outlier_fraction,
        "source_per_class": args.source_per_class,
        "target_per_class": args.target_per_class,
    }
    spec = replace(spec, **{k: v for k, v in inline.items() if v is not None})
    spec.validate()
    return spec


def cmd_bench(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad or not strategies:
        raise UsageError(f"unknown strategies {bad}; valid names: {', '.join(STRATEGIES)}")
    if args.seeds < 3:
        raise UsageError("--seeds must be >= 3")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    spec = _bench_spec(args)
    acfg = _adapt_config(args, BENCH_ADAPT)
    pcfg = PretrainConfig(epochs=args.pretrain_epochs) if args.pretrain_epochs is not None else PretrainConfig()
    seeds = range(args.seed, args.seed + args.seeds)
    report = run_benchmark(spec, strategies, seeds, acfg, pcfg, jobs=args.jobs)
    report.save(args.out, args.accuracy_csv, args.mmd_csv)
    for msg in report.warnings:
        _emit({"command": "bench", "warning": msg})
    acc = report.accuracy_matrix()
    _emit({
        "command": "bench",
        "out": str(args.out),
        "accuracy_shape": list(acc.shape),
        "summary": report.summary(),
    })
    return EXIT_OK


def cmd_mmd(args) -> int:
    _require(args, "features", "model")
    model = load_model(args.model)
    X = _load_x(args, args.features)
    if X.shape[1] != model.d_in:
        raise UsageError(f"model expects {model.d_in} features, got {X.shape[1]}")
    emb, logits = forward(model, X)
    probs = softmax(logits)
    if args.labels:
        y, _ = load_labels(args.labels, format=args.format)
    else:
        y = np.argmax(logits, axis=1)
    value = mmd_to_centroids(emb, y, compute_centroids(emb, probs), kernel=args.kernel, bandwidth=args.bandwidth)
    _emit({"command": "mmd", "kernel": args.kernel, "mmd": value})
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    _require(args, "out_dir")
    spec = replace(_bench_spec(args), seed=args.seed)
    dom = generate_shifted_domains(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "bin" if args.format == "binary" else "csv"
    M = spec.num_classes
    save_features(dom.source_x, out / f"source_x.{ext}", args.format)
    save_labels(dom.source_y, M, out / f"source_y.{ext}", args.format)
    save_features(dom.target_x, out / f"target_x.{ext}", args.format)
    save_labels(dom.target_y, M, out / f"target_y.{ext}", args.format)
    np.savetxt(out / "target_outliers.csv", np.flatnonzero(dom.outlier_mask), fmt="%d")
    with open(out / "spec.json", "w") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    src, tgt = linear_probe_gap(dom)
    _emit({"command": "synth-gen", "out_dir": str(out), "probe_source_acc": src, "probe_target_acc": tgt})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--budget", type=float)
    p.add_argument("--trees", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--subsample", type=int)
    p.add_argument("--lr", type=float, help="backbone learning rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--metric", choices=METRICS)
    p.add_argument("--mmd-kernel", choices=KERNELS)
    p.add_argument("--depth-basis", choices=("subset", "full"))


def _spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", help="SynthSpec JSON; inline flags override its fields")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--rotation-deg", type=float)
    p.add_argument("--translation", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--outlier-fraction", type=float)
    p.add_argument("--source-per-class", type=int)
    p.add_argument("--target-per-class", type=int)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of flag defaults (flags take precedence)")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--format", choices=("binary", "csv"), default="binary")
    common.add_argument("--csv-header", action="store_true", help="skip the first line of CSV feature files")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="proulearn", description="Source-free active domain adaptation on feature embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("pretrain", parents=[common], help="train the source model")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--out-model")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--hidden", type=_int_tuple, default=(32,))
    p.add_argument("--embed-dim", type=int, default=16)
    p.set_defaults(func=cmd_pretrain)
    subs["pretrain"] = p

    p = sub.add_parser("select", parents=[common], help="score target samples and pick the active set")
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--budget", type=float, default=0.05)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--subsample", type=int)
    p.add_argument("--metric", choices=METRICS, default="correlation")
    p.add_argument("--depth-basis", choices=("subset", "full"), default="subset")
    p.add_argument("--labels-oracle")
    p.add_argument("--out")
    p.add_argument("--dump-knn")
    p.add_argument("--dump-scores")
    p.set_defaults(func=cmd_select)
    subs["select"] = p

    p = sub.add_parser("adapt", parents=[common], help="adapt a source model to the target set")
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--labels", help="oracle labels; only the selected ones feed training")
    p.add_argument("--active", help="ActiveSet JSON from `select`; selection is rerun when omitted")
    p.add_argument("--out-model")
    p.add_argument("--report")
    p.add_argument("--epoch-csv")
    p.add_argument("--dump-pseudo")
    p.add_argument("--ablate-cc", action="store_true")
    p.add_argument("--freeze-classifier", action="store_true")
    p.add_argument("--refresh-hpe", action="store_true")
    p.add_argument("--no-refine", action="store_true")
    _adapt_flags(p)
    p.set_defaults(func=cmd_adapt)
    subs["adapt"] = p

    p = sub.add_parser("bench", parents=[common], help="paired synthetic benchmark of selection strategies")
    _spec_flags(p)
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    p.add_argument("--seeds", type=int, default=10, help="number of seeds, counted up from --seed")
    p.add_argument("--out", default="bench.json")
    p.add_argument("--accuracy-csv")
    p.add_argument("--mmd-csv")
    p.add_argument("--pretrain-epochs", type=int)
    _adapt_flags(p)
    p.set_defaults(func=cmd_bench)
    subs["bench"] = p

    p = sub.add_parser("mmd", parents=[common], help="compactness of embeddings around class centroids")
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--labels", help="labels to group by; predictions are used when omitted")
    p.add_argument("--kernel", choices=KERNELS, default="linear")
    p.add_argument("--bandwidth", type=float)
    p.set_defaults(func=cmd_mmd)
    subs["mmd"] = p

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic source/target pair")
    _spec_flags(p)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_synth_gen)
    subs["synth-gen"] = p
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                overlay = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config: {exc}")
        if not isinstance(overlay, dict):
            parser.error("--config must hold a JSON object")
        sp = subs[args.command]
        known = {a.dest for a in sp._actions}
        overlay = {k.replace("-", "_"): v for k, v in overlay.items()}
        unknown = sorted(set(overlay) - known - {"help"})
        if unknown:
            parser.error(f"unknown keys in --config for {args.command}: {unknown}")
        sp.set_defaults(**overlay)
        args = parser.parse_args(argv)
    args.usage = subs[args.command].format_usage()
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=str(args.log_level).upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(args.usage)
        print(f"proulearn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        logger.error("diverged: %s", exc)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        print(f"proulearn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
