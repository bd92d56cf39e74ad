"""Command-line entry point: ``ovparse <subcommand> ...``.

Every subcommand writes its artifacts under ``--out`` together with a
``manifest.json`` that echoes the arguments, configuration, seed and library
versions. Exit status is 1 for invalid input and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import warnings

import numpy as np

from . import __version__
from .conceptops import concept_search, evaluate_expression, nearest_concepts, parse_expression
from .datasets import FeatureDataset, read_dataset, write_dataset
from .embedding import ScoreKind, read_embedding_tsv, write_embedding_tsv
from .experiments import ZERO_SHOT_METHODS, diversity_test, zero_shot_comparison
from .inference import (
    calibrate_threshold,
    classify_closed,
    predict_zero_shot,
    usable_vocabulary,
)
from .metrics import aggregate
from .store import format_predictions, load_model, read_predictions, save_model
from .synthetic import SyntheticSpec, balanced_tree, generate_synthetic
from .taxonomy import (
    build_graph,
    export_dot,
    information_content,
    read_frequency_tsv,
    read_taxonomy_tsv,
    write_frequency_tsv,
    write_taxonomy_tsv,
)
from .training import ConfigError, TrainConfig, EpochLog, train_concepts, train_joint, write_training_log

log = logging.getLogger("ovparse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers --------------------------------------------------------------------


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _load_config(args) -> TrainConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "image_score_kind": getattr(args, "score", None),
        "image_loss": getattr(args, "loss", None),
        "epochs": getattr(args, "epochs", None),
        "concept_epochs": getattr(args, "concept_epochs", None),
        "dim": getattr(args, "dim", None),
    }
    if getattr(args, "ic_weighting", False):
        overrides["ic_weighting"] = True
    if getattr(args, "config", None):
        return TrainConfig.load(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def _load_taxonomy(args):
    graph = build_graph(read_taxonomy_tsv(args.taxonomy))
    counts = read_frequency_tsv(args.freqs) if getattr(args, "freqs", None) else None
    ic = None
    if counts is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ic = information_content(graph, counts)
    return graph, counts, ic


def _vocabulary(args, graph):
    if getattr(args, "vocabulary", None):
        with open(args.vocabulary, encoding="utf-8") as fh:
            return [graph.id_of(line.strip()) for line in fh if line.strip()]
    return list(range(len(graph)))


def _manifest(args, outputs, config: TrainConfig | None = None):
    echo = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    digests = {}
    for path in sorted(outputs):
        with open(path, "rb") as fh:
            digests[os.path.relpath(path, args.out)] = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "command": args.command,
        "arguments": echo,
        "seed": getattr(args, "seed", None) if config is None else config.seed,
        "config": None if config is None else config.to_text().splitlines(),
        "versions": {"ovparse": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "artifacts": digests,
    }
    _write(_out(args, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _report_files(args, report):
    return [
        _write(_out(args, "report.csv"), report.to_csv()),
        _write(_out(args, "report.txt"), report.to_table() + "\n"),
    ]


# -- subcommands ------------------------------------------------------------------


def cmd_build_taxonomy(args):
    graph, counts, ic = _load_taxonomy(args)
    if ic is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ic = information_content(graph, {})
    rows = ["id\tname\tdepth\tparents"]
    for v, name in enumerate(graph.names):
        parents = ",".join(graph.names[p] for p in sorted(graph.parents[v]))
        rows.append(f"{v}\t{name}\t{graph.depth[v]}\t{parents}")
    info = ["name\tfrequency\tinformation"] + [
        f"{n}\t{ic.frequency[v]!r}\t{ic.information[v]!r}" for v, n in enumerate(graph.names)
    ]
    dot_path = args.dot or _out(args, "taxonomy.dot")
    outputs = [
        _write(_out(args, "graph.tsv"), "\n".join(rows) + "\n"),
        _write(_out(args, "information.tsv"), "\n".join(info) + "\n"),
        _write(dot_path, export_dot(graph, ic.frequency)),
    ]
    if counts is not None and ic.unobserved:
        log.warning("%d concept(s) have zero frequency", len(ic.unobserved))
    print(f"{len(graph)} concepts, {len(graph.edges)} edges, max depth {int(graph.depth.max())}")
    _manifest(args, [p for p in outputs if os.path.abspath(p).startswith(os.path.abspath(args.out))])


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_gen_data(args):
    graph = build_graph(balanced_tree(args.branching))
    rng = np.random.default_rng([args.seed, 77])
    held = []
    for parent in sorted({min(graph.parents[l]) for l in graph.leaves}):
        kids = sorted(graph.children[parent])
        k = min(args.held_per_group, len(kids) - 1)
        held.extend(int(c) for c in rng.choice(kids, size=k, replace=False))
    spec = SyntheticSpec(
        graph, tuple(graph.leaves), dim=args.dim, sigma_level=args.sigma_level, sigma_obs=args.sigma_obs,
        samples_per_class=args.samples_per_class, held_out=tuple(sorted(held)), seed=args.seed,
        frequency_skew=args.skew,
    )
    world = generate_synthetic(spec)
    outputs = [_out(args, n) for n in ("taxonomy.tsv", "freqs.tsv", "train.ovsf", "validation.ovsf",
                                        "zeroshot.ovsf", "held_out.txt")]
    write_taxonomy_tsv(graph, outputs[0])
    write_frequency_tsv(world.own_counts, outputs[1])
    write_dataset(world.train, outputs[2])
    write_dataset(world.validation, outputs[3])
    write_dataset(world.zero_shot_test, outputs[4])
    _write(outputs[5], "".join(graph.names[c] + "\n" for c in spec.held_out))
    if args.grid:
        outputs.append(_out(args, "scene.ovsg"))
        write_dataset(_scene_grid(world, args.grid, args.seed), outputs[-1])
    print(f"train {len(world.train)}, validation {len(world.validation)}, zero-shot {len(world.zero_shot_test)}")
    _manifest(args, outputs)


def _scene_grid(world, shape, seed):
    """A single H x W scene: vertical stripes of classes drawn from the training split."""
    h, w = shape
    rng = np.random.default_rng([seed, 55])
    classes = sorted(set(world.train.labels.tolist()))
    stripe = rng.choice(classes, size=min(4, len(classes)), replace=False)
    labels = np.empty((h, w), dtype=np.int64)
    feats = np.empty((h, w, world.train.dim), dtype=np.float32)
    for j in range(w):
        c = stripe[j * len(stripe) // w]
        pool = world.train.features[world.train.labels == c]
        labels[:, j] = c
        feats[:, j] = pool[rng.integers(0, len(pool), size=h)]
    return FeatureDataset.from_grids([(labels, feats)])


def cmd_train_concepts(args):
    graph, _, _ = _load_taxonomy(args)
    config = _load_config(args)
    table, losses = train_concepts(graph, config)
    outputs = [_out(args, "embeddings.tsv"), _out(args, "concept_log.csv")]
    write_embedding_tsv(graph.names, table, outputs[0])
    write_training_log([EpochLog(e, l, 0.0, l) for e, l in enumerate(losses)], outputs[1])
    if losses:
        print(f"concept loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} epochs")
    _manifest(args, outputs, config)


def cmd_train_joint(args):
    graph, counts, ic = _load_taxonomy(args)
    config = _load_config(args)
    data = read_dataset(args.data)
    data.check_labels(len(graph))
    if args.embeddings:
        table = read_embedding_tsv(args.embeddings, graph.names)
        if table.dim != config.dim:
            raise ConfigError(f"initial embeddings have dim {table.dim}, config dim is {config.dim}")
    else:
        table, _ = train_concepts(graph, config)
    if args.candidates:
        with open(args.candidates, encoding="utf-8") as fh:
            cand = [graph.id_of(line.strip()) for line in fh if line.strip()]
    else:
        cand = sorted(set(data.labels.tolist()))
    if config.ic_weighting and ic is None:
        raise ConfigError("--ic-weighting needs --freqs")
    model = train_joint(graph, data, cand, config, table, ic)
    outputs = save_model(model, args.out, counts)
    last = model.training_log[-1] if model.training_log else None
    if last:
        print(f"epoch {last.epoch}: concept {last.concept_loss:.4f} image {last.image_loss:.4f} total {last.total:.4f}")
    _manifest(args, outputs, config)


def _eval_data(args, graph):
    data = read_dataset(args.data)
    data.check_labels(len(graph))
    return data


def cmd_eval_closed(args):
    if args.predictions:
        if not args.taxonomy:
            raise UsageError("--predictions needs --taxonomy")
        graph, _, ic = _load_taxonomy(args)
        data = _eval_data(args, graph)
        pred = read_predictions(args.predictions, graph)
        outputs = []
    else:
        if not args.model:
            raise UsageError("eval-closed needs --model or --predictions")
        model = load_model(args.model)
        graph, ic = model.graph, model.ic
        data = _eval_data(args, graph)
        cand = model.candidates or sorted(set(data.labels.tolist()))
        preds = [classify_closed(model, x, cand) for x in data.features]
        pred = np.array([p.primary for p in preds])
        outputs = [_write(_out(args, "predictions.tsv"), format_predictions(graph.names, preds))]
    if len(pred) != len(data):
        raise ValueError(f"{len(pred)} predictions for {len(data)} samples")
    report = aggregate(graph, ic, pred, data.labels)
    outputs += _report_files(args, report)
    print(report.to_table())
    _manifest(args, outputs)


def _read_cutoff(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("cutoff"):
                return float(line.split("=", 1)[1])
    raise ValueError(f"{path}: no 'cutoff=' line")


def cmd_calibrate(args):
    model = load_model(args.model)
    data = _eval_data(args, model.graph)
    cal = calibrate_threshold(model, data, _vocabulary(args, model.graph), steps=args.steps)
    path = _write(_out(args, "cutoff.txt"), f"cutoff={cal.cutoff!r}\nhier_f={cal.score!r}\n")
    grid = _out(args, "calibration.csv")
    with open(grid, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cutoff", "hier_f"])
        w.writerows([[repr(float(c)), repr(float(o))] for c, o in zip(cal.grid, cal.objective)])
    print(f"cutoff {cal.cutoff:.6g} (validation hierarchical F {cal.score:.4f})")
    _manifest(args, [path, grid])


def cmd_eval_zeroshot(args):
    model = load_model(args.model)
    data = _eval_data(args, model.graph)
    if args.cutoff is None and not args.cutoff_file:
        raise UsageError("eval-zeroshot needs --cutoff or --cutoff-file")
    cutoff = args.cutoff if args.cutoff is not None else _read_cutoff(args.cutoff_file)
    vocab = _vocabulary(args, model.graph)
    preds = [predict_zero_shot(model, x, vocab, cutoff) for x in data.features]
    outputs = [_write(_out(args, "predictions.tsv"), format_predictions(model.graph.names, preds))]
    report = aggregate(model.graph, model.ic, [p.primary for p in preds], data.labels)
    outputs += _report_files(args, report)
    print(report.to_table())
    _manifest(args, outputs)


def _query_vector(model, expr):
    tree = parse_expression(expr)
    return evaluate_expression(tree, lambda name: model.table.vectors[model.graph.id_of(name)])


def cmd_search(args):
    model = load_model(args.model)
    data = read_dataset(args.data)
    if data.grid_shape is None:
        raise ValueError(f"{args.data} is not a grid dataset (OVSG)")
    grids = data.grids
    if not 0 <= args.grid_index < len(grids):
        raise ValueError(f"grid index {args.grid_index} out of range (0..{len(grids) - 1})")
    tree = parse_expression(args.query)
    query = model.graph.id_of(tree) if isinstance(tree, str) else _query_vector(model, args.query)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        smap = concept_search(model, grids[args.grid_index][1], query, label=args.query)
    stem = args.stem or "".join(ch if ch.isalnum() else "_" for ch in args.query).strip("_")
    outputs = list(smap.save(_out(args, stem)))
    if smap.degenerate:
        log.warning("%d cell(s) with degenerate embeddings", smap.degenerate)
    print(f"wrote {outputs[0]} and {outputs[1]}")
    _manifest(args, outputs)


def cmd_synth(args):
    model = load_model(args.model)
    vec = _query_vector(model, args.query)
    kind = ScoreKind.parse(args.score)
    vocab = usable_vocabulary(model, _vocabulary(args, model.graph))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ranked = nearest_concepts(model.table.vectors, vec, args.k, kind, vocab)
    lines = ["rank\tconcept\tscore"] + [
        f"{i + 1}\t{model.graph.names[c]}\t{s:.6g}" for i, (c, s) in enumerate(ranked)
    ]
    path = _write(_out(args, "nearest.tsv"), "\n".join(lines) + "\n")
    vec_path = _write(_out(args, "vector.txt"), ",".join(repr(float(x)) for x in vec) + "\n")
    print("\n".join(lines))
    _manifest(args, [path, vec_path])


def cmd_diversity(args):
    config = _load_config(args) if (args.config or args.epochs) else TrainConfig(seed=args.seed, epochs=60)
    rows = diversity_test(args.train_classes, seed=args.seed, config=config)
    path = _out(args, "diversity.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    for r in rows:
        print(f"{r['train_classes']:>5} classes  HF {r['hier_f']:.4f}  info {r['info_ratio']:.4f}")
    _manifest(args, [path], config)


def cmd_compare(args):
    config = _load_config(args) if (args.config or args.epochs) else TrainConfig(seed=args.seed, epochs=100)
    reports, _ = zero_shot_comparison(args.seed, config)
    path = _out(args, "comparison.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "hier_precision", "hier_recall", "hier_f", "info_ratio"])
        for name in ZERO_SHOT_METHODS:
            r = reports[name]
            w.writerow([name] + [f"{getattr(r, k):.10g}" for k in ("hier_precision", "hier_recall", "hier_f", "info_ratio")])
            print(f"{name:<20} HF {r.hier_f:.4f}  info {r.info_ratio:.4f}")
    _manifest(args, [path], config)


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ovparse", description="Open-vocabulary joint concept/pixel embeddings.")
    p.add_argument("--version", action="version", version=f"ovparse {__version__}")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    def training_flags(sp):
        sp.add_argument("--config", help="key=value training config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dim", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--concept-epochs", type=int)

    sp = add("build-taxonomy", cmd_build_taxonomy, "validate a taxonomy, compute information content, export DOT")
    sp.add_argument("--taxonomy", required=True)
    sp.add_argument("--freqs")
    sp.add_argument("--dot", help="DOT output path (default <out>/taxonomy.dot)")

    sp = add("gen-data", cmd_gen_data, "generate a synthetic hierarchical Gaussian world")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--branching", type=_int_list, default=[5, 5])
    sp.add_argument("--held-per-group", type=int, default=1)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--samples-per-class", type=int, default=60)
    sp.add_argument("--sigma-level", type=_float_list, default=[3.0, 1.5])
    sp.add_argument("--sigma-obs", type=float, default=0.6)
    sp.add_argument("--skew", type=float, default=0.5)
    sp.add_argument("--grid", type=_int_list, help="also write an HxW scene grid, e.g. 8,12")

    sp = add("train-concepts", cmd_train_concepts, "pretrain concept embeddings on the taxonomy")
    sp.add_argument("--taxonomy", required=True)
    training_flags(sp)

    sp = add("train-joint", cmd_train_joint, "jointly train concept and pixel embeddings")
    sp.add_argument("--taxonomy", required=True)
    sp.add_argument("--freqs")
    sp.add_argument("--data", required=True)
    sp.add_argument("--embeddings", help="initial concept embeddings (default: pretrain now)")
    sp.add_argument("--candidates", help="file of candidate label names (default: labels in --data)")
    sp.add_argument("--score", choices=["l2", "cosine", "hyper", "dot"])
    sp.add_argument("--loss", choices=["softmax", "margin"])
    sp.add_argument("--ic-weighting", action="store_true")
    training_flags(sp)

    sp = add("eval-closed", cmd_eval_closed, "closed-set prediction and flat + hierarchical report")
    sp.add_argument("--model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--predictions", help="evaluate an existing prediction dump instead of a model")
    sp.add_argument("--taxonomy")
    sp.add_argument("--freqs")

    sp = add("calibrate", cmd_calibrate, "find the zero-shot cutoff on a validation set")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--vocabulary")
    sp.add_argument("--steps", type=int, default=50)

    sp = add("eval-zeroshot", cmd_eval_zeroshot, "thresholded open-vocabulary prediction and report")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--cutoff", type=float)
    sp.add_argument("--cutoff-file")
    sp.add_argument("--vocabulary")

    sp = add("search", cmd_search, "score map of a concept or min/max expression over a feature grid")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="OVSG grid dataset")
    sp.add_argument("--query", required=True)
    sp.add_argument("--grid-index", type=int, default=0)
    sp.add_argument("--stem")

    sp = add("synth", cmd_synth, "nearest concepts to a min/max synthesized concept")
    sp.add_argument("--model", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--score", choices=["l2", "cosine", "hyper"], default="cosine",
                    help="ranking score (default cosine; under hyper the root ties every query)")
    sp.add_argument("--vocabulary")

    sp = add("diversity", cmd_diversity, "zero-shot quality versus number of training classes")
    sp.add_argument("--train-classes", type=_int_list, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)

    sp = add("compare", cmd_compare, "zero-shot comparison of Joint-Hyper against the baselines")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)
    return p


def _thread_limit():
    value = os.environ.get("OVPARSE_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"OVPARSE_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("ovparse: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        limiter = _thread_limit()
        try:
            args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ovparse {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"ovparse {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
