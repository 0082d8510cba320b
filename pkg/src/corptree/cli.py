"""Command-line entry point: synth, map, train, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every file-producing run writes ``run_config.json`` with the fully resolved
configuration (flag > config file > default) so results are reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataset import (
    DEFAULT_SCHEMA,
    LabelSpec,
    all_keys,
    apply_standardization,
    filter_sme,
    generate_synthetic,
    load_dataset,
    split_dataset,
    standardize,
    truth_path_for,
    write_csv,
    write_truth,
)
from .diffcore import ParameterStore
from .errors import DataError, NumericalError
from .graph_mapping import build_graph, export_graph, indicator_vectors
from .metrics import compute_report, export_metrics
from .model import GraphBatch, ModelConfig, init_params, loss_and_grad
from .training import (
    Checkpoint,
    TrainConfig,
    build_samples,
    evaluate,
    fit,
    global_graph_edges,
    load_checkpoint,
    save_checkpoint,
    write_history,
)

FULL_MODEL_TOLERANCE = 1e-4
PER_OP_TOLERANCE = 1e-6


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# Per-command defaults; argparse flags default to None so that explicit flags
# can be distinguished from config-file values.
TRAIN_DEFAULTS = {
    "classes": 3,
    "graph": "tree",
    "plus_k": 10,
    "window": 4,
    "abs_similarity": False,
    "global_graph": False,
    "pool_ratio": 0.8,
    "split_ratios": "0.8,0.1,0.1",
    "sme_quantile": None,
    "epochs": 120,
    "batch_size": 32,
    "optimizer": "adam",
    "lr_max": 1e-3,
    "lr_min": 1e-5,
    "t0": 10,
    "t_mult": 2,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "patience": 30,
    "class_weights": False,
    "seed": 0,
}
SYNTH_DEFAULTS = {"n": 600, "years": 8, "sigma": 0.1, "seed": 0}
MAP_DEFAULTS = {
    "window": 4,
    "plus_k": 0,
    "abs_similarity": False,
    "global_graph": False,
    "format": "edge-json",
    "seed": 0,
}
EVAL_DEFAULTS = {"split": "test", "seed": 0}
GRADCHECK_DEFAULTS = {"eps": 1e-5, "seed": 0}


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise _UsageError(f"config file not found: {path}")
    if p.suffix == ".json":
        return json.loads(p.read_text(encoding="utf-8"))
    if p.suffix == ".toml":
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(p.read_text(encoding="utf-8"))
    raise _UsageError(f"config file must be .json or .toml, got {path}")


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flag > config file > default for every known option."""
    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise _UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        resolved[key] = flag if flag is not None else file_values.get(key, default)
    if resolved.get("seed") is not None and resolved["seed"] < 0:
        raise _UsageError(f"--seed must be >= 0, got {resolved['seed']}")
    return resolved


def _write_run_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **resolved}
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8"
    )


def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise _UsageError(f"cannot parse split ratios {text!r}") from None
    if len(parts) != 3:
        raise _UsageError("split ratios must have three comma-separated parts")
    return parts


# --- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve(args, SYNTH_DEFAULTS)
    if cfg["sigma"] < 0:
        raise _UsageError(f"--sigma must be >= 0, got {cfg['sigma']}")
    if cfg["n"] < 10:
        raise _UsageError(f"--n must be >= 10, got {cfg['n']}")
    if cfg["years"] < 2:
        raise _UsageError(f"--years must be >= 2, got {cfg['years']}")

    out_file = Path(args.out)
    panels, truth = generate_synthetic(cfg["n"], cfg["years"], cfg["sigma"], cfg["seed"])
    out_file.parent.mkdir(parents=True, exist_ok=True)
    write_csv(panels, out_file)
    write_truth(truth, truth_path_for(out_file))
    _write_run_config(out_file.parent, "synth", cfg)
    print(f"wrote {sum(p.n_years for p in panels)} rows to {out_file}")
    return 0


# --- map -----------------------------------------------------------------------


def cmd_map(args) -> int:
    cfg = _resolve(args, MAP_DEFAULTS)
    out_dir = Path(args.out)
    panels = load_dataset(args.data)
    std_panels, _, _ = standardize(panels, all_keys(panels))

    graphs_dir = out_dir / "graphs"
    graphs_dir.mkdir(parents=True, exist_ok=True)
    ext = "dot" if cfg["format"] == "dot" else "json"

    global_edges_graph = None
    if cfg["global_graph"]:
        rows = np.vstack([p.values for p in std_panels])
        global_edges_graph = build_graph(
            rows, plus_k=cfg["plus_k"], abs_similarity=cfg["abs_similarity"]
        )

    edge_counts = []
    exported = 0
    for panel in std_panels:
        for year in panel.years[1:]:  # first year has no 2-row window
            if global_edges_graph is not None:
                graph = global_edges_graph
            else:
                graph = build_graph(
                    indicator_vectors(panel, year, cfg["window"]),
                    plus_k=cfg["plus_k"],
                    abs_similarity=cfg["abs_similarity"],
                )
            text = export_graph(graph, cfg["format"], DEFAULT_SCHEMA.names)
            (graphs_dir / f"{panel.enterprise_id}_{year}.{ext}").write_text(
                text, encoding="utf-8"
            )
            edge_counts.append(graph.n_edges)
            exported += 1

    summary = {
        "num_graphs": exported,
        "edge_count_min": min(edge_counts) if edge_counts else 0,
        "edge_count_max": max(edge_counts) if edge_counts else 0,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    _write_run_config(out_dir, "map", cfg)
    print(f"exported {exported} graphs to {graphs_dir}")
    return 0


# --- train -----------------------------------------------------------------------


def _prepare_splits(panels, resolved, label_spec):
    ratios = _parse_ratios(resolved["split_ratios"])
    split = split_dataset(panels, ratios, resolved["seed"], label_spec)
    std_panels, means, stds = standardize(panels, list(split.train))
    plus_k = resolved["plus_k"] if resolved["graph"] == "tree-plus" else 0
    global_edges = (
        global_graph_edges(
            std_panels, list(split.train), plus_k=plus_k,
            abs_similarity=resolved["abs_similarity"],
        )
        if resolved["global_graph"]
        else None
    )
    samples = {
        part: build_samples(
            std_panels,
            list(split.part(part)),
            label_spec,
            window=resolved["window"],
            plus_k=plus_k,
            abs_similarity=resolved["abs_similarity"],
            global_edges=global_edges,
        )
        for part in ("train", "validation", "test")
    }
    return split, samples, means, stds


def cmd_train(args) -> int:
    resolved = _resolve(args, TRAIN_DEFAULTS)
    out_dir = Path(args.out)
    panels = load_dataset(args.data)
    if resolved["sme_quantile"] is not None:
        panels = filter_sme(panels, resolved["sme_quantile"])

    label_spec = LabelSpec.default(resolved["classes"])
    split, samples, means, stds = _prepare_splits(panels, resolved, label_spec)

    model_cfg = ModelConfig(
        node_in_dim=resolved["window"],
        pool_ratio=resolved["pool_ratio"],
        num_classes=resolved["classes"],
        seed=resolved["seed"],
    )
    train_cfg = TrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        optimizer=resolved["optimizer"],
        lr_max=resolved["lr_max"],
        lr_min=resolved["lr_min"],
        restart_period_0=resolved["t0"],
        restart_mult=resolved["t_mult"],
        momentum=resolved["momentum"],
        weight_decay=resolved["weight_decay"],
        seed=resolved["seed"],
        early_stop_patience=resolved["patience"],
        class_weights=resolved["class_weights"],
    )

    result = fit(samples["train"], samples["validation"], model_cfg, train_cfg)

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_config(out_dir, "train", resolved)
    ckpt = Checkpoint(
        params=result.params,
        model_cfg=model_cfg,
        means=means,
        stds=stds,
        label_spec=label_spec,
        pipeline={
            "window": resolved["window"],
            "graph": resolved["graph"],
            "plus_k": resolved["plus_k"] if resolved["graph"] == "tree-plus" else 0,
            "abs_similarity": resolved["abs_similarity"],
            "global_graph": resolved["global_graph"],
            "split_ratios": list(_parse_ratios(resolved["split_ratios"])),
            "split_seed": resolved["seed"],
            "sme_quantile": resolved["sme_quantile"],
        },
    )
    save_checkpoint(out_dir / "checkpoint.json", ckpt)
    write_history(result.history, out_dir / "history.csv")

    if samples["validation"]:
        _, _, probs, labels = evaluate(samples["validation"], result.params, model_cfg)
        report, curves = compute_report(probs, labels, model_cfg.num_classes)
        export_metrics(report, curves, out_dir)
    else:
        print("validation split is empty; skipping metric export")

    print(
        f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
        f"val_loss {result.best_val_loss:.4f} val_acc "
        f"{result.history[result.best_epoch].val_acc:.4f}"
    )
    return 0


# --- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    resolved = _resolve(args, EVAL_DEFAULTS)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    pipeline = ckpt.pipeline

    panels = load_dataset(args.data)
    if pipeline.get("sme_quantile") is not None:
        panels = filter_sme(panels, pipeline["sme_quantile"])
    split = split_dataset(
        panels, tuple(pipeline["split_ratios"]), pipeline["split_seed"], ckpt.label_spec
    )
    std_panels = apply_standardization(panels, ckpt.means, ckpt.stds)
    plus_k = pipeline["plus_k"] if pipeline["graph"] == "tree-plus" else 0
    global_edges = (
        global_graph_edges(
            std_panels, list(split.train), plus_k=plus_k,
            abs_similarity=pipeline["abs_similarity"],
        )
        if pipeline.get("global_graph")
        else None
    )
    samples = build_samples(
        std_panels,
        list(split.part(resolved["split"])),
        ckpt.label_spec,
        window=pipeline["window"],
        plus_k=plus_k,
        abs_similarity=pipeline["abs_similarity"],
        global_edges=global_edges,
    )
    if not samples:
        raise DataError(f"no usable samples in split {resolved['split']!r}")

    loss, acc, probs, labels = evaluate(samples, ckpt.params, ckpt.model_cfg)
    report, curves = compute_report(probs, labels, ckpt.model_cfg.num_classes)
    report["loss"] = loss
    report["split"] = resolved["split"]

    out_dir = Path(args.out)
    export_metrics(report, curves, out_dir)
    _write_run_config(out_dir, "eval", {**resolved, "checkpoint": str(ckpt_path)})
    print(f"{resolved['split']} accuracy {acc:.4f}, loss {loss:.4f} -> {out_dir}")
    return 0


# --- gradcheck ---------------------------------------------------------------------


def op_checks(seed: int, eps: float) -> dict[str, float]:
    """Max relative FD error for each diffcore op, probed on random inputs."""
    rng = np.random.default_rng(seed)

    def away_from_zero(shape, margin=1e-3):
        u = rng.uniform(-2.0, 2.0, size=shape)
        return np.where(np.abs(u) < margin, u + 4.0 * margin, u)

    checks = {}

    def run(name, store, f):
        checks[name] = dc.grad_check(f, store, eps)

    # matmul
    store = ParameterStore()
    store.add("a", rng.uniform(-2, 2, (4, 3)))
    store.add("b", rng.uniform(-2, 2, (3, 5)))
    r = rng.uniform(-1, 1, (4, 5))

    def f_matmul(s):
        out = dc.matmul(s.value("a"), s.value("b"))
        da, db = dc.matmul_backward(r, s.value("a"), s.value("b"))
        s.grad("a")[...] += da
        s.grad("b")[...] += db
        return float((out * r).sum())

    run("matmul", store, f_matmul)

    # add_bias
    store = ParameterStore()
    store.add("x", rng.uniform(-2, 2, (5, 4)))
    store.add("b", rng.uniform(-2, 2, (1, 4)))
    r = rng.uniform(-1, 1, (5, 4))

    def f_bias(s):
        out = dc.add_bias(s.value("x"), s.value("b"))
        dx, db = dc.add_bias_backward(r)
        s.grad("x")[...] += dx
        s.grad("b")[...] += db
        return float((out * r).sum())

    run("add_bias", store, f_bias)

    # relu (inputs bounded away from the kink)
    store = ParameterStore()
    store.add("x", away_from_zero((5, 4)))
    r = rng.uniform(-1, 1, (5, 4))

    def f_relu(s):
        out = dc.relu(s.value("x"))
        s.grad("x")[...] += dc.relu_backward(r, s.value("x"))
        return float((out * r).sum())

    run("relu", store, f_relu)

    # tanh
    store = ParameterStore()
    store.add("x", rng.uniform(-2, 2, (5, 4)))
    r = rng.uniform(-1, 1, (5, 4))

    def f_tanh(s):
        out = dc.tanh_op(s.value("x"))
        s.grad("x")[...] += dc.tanh_backward(r, out)
        return float((out * r).sum())

    run("tanh", store, f_tanh)

    # segment_mean, including an empty segment
    store = ParameterStore()
    store.add("x", rng.uniform(-2, 2, (6, 3)))
    segments = np.array([0, 0, 1, 1, 1, 3])
    r = rng.uniform(-1, 1, (4, 3))

    def f_segmean(s):
        out = dc.segment_mean(s.value("x"), segments, 4)
        s.grad("x")[...] += dc.segment_mean_backward(r, segments, 4)
        return float((out * r).sum())

    run("segment_mean", store, f_segmean)

    # gather_rows with a duplicated index (scatter-add path)
    store = ParameterStore()
    store.add("x", rng.uniform(-2, 2, (5, 3)))
    idx = np.array([2, 0, 2, 4])
    r = rng.uniform(-1, 1, (4, 3))

    def f_gather(s):
        out = dc.gather_rows(s.value("x"), idx)
        s.grad("x")[...] += dc.gather_rows_backward(r, idx, 5)
        return float((out * r).sum())

    run("gather_rows", store, f_gather)

    # scale_rows
    store = ParameterStore()
    store.add("x", rng.uniform(-2, 2, (5, 4)))
    store.add("g", rng.uniform(-2, 2, (5, 1)))
    r = rng.uniform(-1, 1, (5, 4))

    def f_scale(s):
        out = dc.scale_rows(s.value("x"), s.value("g"))
        dx, dg = dc.scale_rows_backward(r, s.value("x"), s.value("g"))
        s.grad("x")[...] += dx
        s.grad("g")[...] += dg
        return float((out * r).sum())

    run("scale_rows", store, f_scale)

    # softmax cross-entropy
    store = ParameterStore()
    store.add("logits", rng.uniform(-2, 2, (6, 4)))
    labels = rng.integers(0, 4, size=6)

    def f_xent(s):
        loss, probs = dc.softmax_xent(s.value("logits"), labels)
        s.grad("logits")[...] += dc.softmax_xent_backward(probs, labels)
        return loss

    run("softmax_xent", store, f_xent)

    return checks


def random_batch(rng: np.random.Generator, num_graphs: int = 2, nodes: int = 6,
                 node_dim: int = 3, num_classes: int = 3) -> GraphBatch:
    """Small random block-diagonal batch with ring-plus-chords edges."""
    xs, edges, graph_of_node, labels = [], [], [], []
    offset = 0
    for g in range(num_graphs):
        xs.append(rng.uniform(-2.0, 2.0, size=(nodes, node_dim)))
        ring = [(offset + i, offset + (i + 1) % nodes) for i in range(nodes)]
        chord = (offset, offset + nodes // 2)
        edges.extend(ring + [chord])
        graph_of_node.extend([g] * nodes)
        labels.append(int(rng.integers(0, num_classes)))
        offset += nodes
    edge_arr = np.array(sorted({(min(a, b), max(a, b)) for a, b in edges}), dtype=np.int64)
    return GraphBatch(
        x=np.vstack(xs),
        edges=edge_arr,
        graph_of_node=np.array(graph_of_node, dtype=np.int64),
        num_graphs=num_graphs,
        labels=np.array(labels, dtype=np.int64),
    )


def full_model_check(seed: int, eps: float) -> float:
    """FD check of the complete loss gradient on a random 2-graph batch.

    Uses a narrow hidden width: the backward composition is identical at any
    width and central differences cost two evaluations per coordinate.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(node_in_dim=3, hidden_dim=8, mlp_hidden=8, num_classes=3, seed=seed)
    batch = random_batch(rng, node_dim=cfg.node_in_dim, num_classes=cfg.num_classes)
    params = init_params(cfg)

    def f(store):
        loss, _ = loss_and_grad(batch, store, cfg)
        return loss

    return dc.grad_check(f, params, eps)


def cmd_gradcheck(args) -> int:
    resolved = _resolve(args, GRADCHECK_DEFAULTS)
    eps = resolved["eps"]
    seed = resolved["seed"]

    checks = op_checks(seed, eps)
    model_err = full_model_check(seed, eps)

    print(f"probe eps = {eps!r}, seed = {seed}")
    ok = True
    for name, err in checks.items():
        status = "ok" if err < PER_OP_TOLERANCE else "FAIL"
        ok &= err < PER_OP_TOLERANCE
        print(f"  {name:<14s} max rel err {err:.3e}  [{status}]")
    status = "ok" if model_err < FULL_MODEL_TOLERANCE else "FAIL"
    ok &= model_err < FULL_MODEL_TOLERANCE
    print(f"  {'full_model':<14s} max rel err {model_err:.3e}  [{status}]")

    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = {"eps": eps, "seed": seed, "ops": checks, "full_model": model_err}
        (out_dir / "gradcheck.json").write_text(
            json.dumps(report, indent=1, sort_keys=True), encoding="utf-8"
        )
        _write_run_config(out_dir, "gradcheck", resolved)

    if not ok:
        raise NumericalError("gradient check exceeded tolerance")
    return 0


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="corptree",
        description="Indicator-graph credit rating pipeline: synthesize data, "
                    "map graphs, train, evaluate, check gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic panel CSV + truth sidecar")
    p.add_argument("--n", type=int, help="number of enterprises")
    p.add_argument("--years", type=int, help="years per enterprise")
    p.add_argument("--sigma", type=float, help="indicator noise scale")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON/TOML config file")
    p.add_argument("-o", "--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("map", help="export per-sample indicator graphs")
    p.add_argument("--data", required=True, help="panel CSV")
    p.add_argument("--window", type=int)
    p.add_argument("--plus-k", dest="plus_k", type=int)
    p.add_argument("--abs-similarity", dest="abs_similarity", action="store_const", const=True)
    p.add_argument("--global-graph", dest="global_graph", action="store_const", const=True)
    p.add_argument("--format", choices=("dot", "edge-json"))
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("train", help="train a classifier and evaluate on validation")
    p.add_argument("--data", required=True, help="panel CSV")
    p.add_argument("--classes", type=int, choices=(3, 5, 8))
    p.add_argument("--graph", choices=("tree", "tree-plus"))
    p.add_argument("--plus-k", dest="plus_k", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--pool-ratio", dest="pool_ratio", type=float)
    p.add_argument("--abs-similarity", dest="abs_similarity", action="store_const", const=True)
    p.add_argument("--global-graph", dest="global_graph", action="store_const", const=True)
    p.add_argument("--split-ratios", dest="split_ratios")
    p.add_argument("--sme-quantile", dest="sme_quantile", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr-max", dest="lr_max", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--t0", type=int, help="first cosine cycle length in epochs")
    p.add_argument("--t-mult", dest="t_mult", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--class-weights", dest="class_weights", action="store_const", const=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--eps", type=float, help="finite-difference probe step")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("-o", "--out", help="optional report directory")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return int(args.func(args) or 0)
    except _UsageError as exc:
        print(f"corptree: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"corptree: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"corptree: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
