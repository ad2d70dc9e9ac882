"""Command-line entry point: ``hspgnn <command> --config cfg.json --out DIR``.

Every command reads one JSON config (unknown keys are rejected), writes its
artifacts plus ``resolved_config.json`` into ``--out`` and exits 0. Failures
print a JSON object ``{"error": ..., "message": ...}`` to stderr and exit 1.
Relative paths in a config resolve against the config file's directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys

import numpy as np

from . import bench as bn
from . import data as dt
from . import explain as ex
from . import graphops as go
from .estimator import HSPGNNImputer, split_missing
from .exceptions import ConfigurationError, HSPGNNError, ValidationError
from .model import checkpoint_load, checkpoint_save, imputation_metrics

logger = logging.getLogger("hspgnn")

MODEL_KEYS = {
    "M": 60,
    "K": 1,
    "k_t": 3,
    "hidden": None,
    "variant": "standard",
    "init": "passthrough",
    "init_scale": 0.01,
    "use_mlp": True,
    "use_satt": True,
    "use_physics": True,
    "use_predictor": True,
    "pinn_weight": 0.0,
}
TRAIN_KEYS = {
    "epochs": 30,
    "batch_size": 16,
    "learning_rate": 0.0005,
    "decay": 0.92,
    "validation_fraction": 0.16,
    "stride": None,
    "augment": True,
    "reconstruction_weight": 0.0,
}

DEFAULTS = {
    "synth": {"n_nodes": 20, "T": 2000, "alpha": 0.9, "graph_seed": 0, "noise_sigma": 0.01, "edge_prob": 0.3, "seed": 0},
    "mask": {
        "series": None,
        "original_mask": None,
        "kind": "point",
        "point_rate": 0.25,
        "block_drop_rate": 0.05,
        "block_failure_prob": 0.0015,
        "block_duration_range": [12, 48],
        "seed": 0,
    },
    "train": {"series": None, "adjacency": None, "seed": 0, **MODEL_KEYS, **TRAIN_KEYS},
    "impute": {"checkpoint": None, "series": None},
    "evaluate": {"imputed": None, "ground_truth": None, "mask": None},
    "ablate": {
        "series": None,
        "ground_truth": None,
        "mask": None,
        "adjacency": None,
        "seed": 0,
        "variants": ["without_satt", "without_physics", "without_predictor", "without_mlp", "vanilla_pinn"],
        "k_hops": [1, 2, [1, 2]],
        "pinn_penalty": 0.1,
        **MODEL_KEYS,
        **TRAIN_KEYS,
    },
    "explain": {
        "checkpoint": None,
        "series": None,
        "flow_K": 480,
        "flow_steps": 200,
        "flow_lr": 0.0001,
        "flow_batch": 100,
        "objective_sign": "elbo",
        "seed": 0,
    },
    "bench": {"M_values": [30, 60, 120], "N": 300, "order": 3, "repeats": 20, "seed": 0},
}
REQUIRED = {
    "mask": ["series"],
    "train": ["series"],
    "impute": ["checkpoint", "series"],
    "evaluate": ["imputed", "ground_truth", "mask"],
    "ablate": ["series", "ground_truth"],
    "explain": ["checkpoint", "series"],
}
PATH_KEYS = {"series", "original_mask", "adjacency", "checkpoint", "imputed", "ground_truth", "mask"}

ABLATIONS = {
    "without_satt": {"use_satt": False},
    "without_physics": {"use_physics": False},
    "without_predictor": {"use_predictor": False},
    "without_mlp": {"use_mlp": False},
    "vanilla_pinn": {"use_physics": False},  # penalty weight filled in from the config
}


def resolve_config(command: str, user: dict, base_dir: str = ".") -> dict:
    """Defaults overlaid with ``user``; unknown or missing keys raise."""
    if not isinstance(user, dict):
        raise ConfigurationError("config must be a JSON object")
    defaults = DEFAULTS[command]
    unknown = sorted(set(user) - set(defaults))
    if unknown:
        raise ConfigurationError(f"unknown config keys for '{command}': {unknown}")
    cfg = copy.deepcopy(defaults)
    cfg.update(user)
    missing = [k for k in REQUIRED.get(command, []) if cfg.get(k) is None]
    if missing:
        raise ConfigurationError(f"missing required config keys for '{command}': {missing}")
    for k in PATH_KEYS & set(cfg):
        if cfg[k] is not None and not os.path.isabs(cfg[k]):
            cfg[k] = os.path.normpath(os.path.join(base_dir, cfg[k]))
    return cfg


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_series_nan(path) -> np.ndarray:
    values, mask = dt.load_series_csv(path)
    return np.where(mask.astype(bool), np.nan, values)


def _estimator_kwargs(cfg: dict) -> dict:
    keys = set(MODEL_KEYS) | set(TRAIN_KEYS) | {"seed"}
    return {k: cfg[k] for k in keys}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict, out: str) -> None:
    values, graph = dt.synth_diffusion(
        n_nodes=cfg["n_nodes"],
        T=cfg["T"],
        alpha=cfg["alpha"],
        graph_seed=cfg["graph_seed"],
        noise_sigma=cfg["noise_sigma"],
        seed=cfg["seed"],
        edge_prob=cfg["edge_prob"],
    )
    dt.write_series_csv(os.path.join(out, "series.csv"), values)
    dt.write_series_csv(os.path.join(out, "ground_truth.csv"), values)
    go.save_adjacency_csv(graph, os.path.join(out, "adjacency.csv"))


def cmd_mask(cfg: dict, out: str) -> None:
    values, mask = dt.load_series_csv(cfg["series"])
    if cfg["original_mask"] is not None:
        extra = dt.load_mask_csv(cfg["original_mask"])
        if extra.shape != mask.shape:
            raise ValidationError(f"original mask shape {extra.shape} != series shape {mask.shape}")
        mask = np.maximum(mask, extra)
    pattern = dt.MissingPattern(
        kind=cfg["kind"],
        point_rate=cfg["point_rate"],
        block_drop_rate=cfg["block_drop_rate"],
        block_failure_prob=cfg["block_failure_prob"],
        block_duration_range=tuple(cfg["block_duration_range"]),
        seed=cfg["seed"],
    )
    new_mask = dt.apply_missing(values, mask, pattern)
    dt.write_series_csv(os.path.join(out, "masked_series.csv"), values, new_mask)
    dt.write_mask_csv(os.path.join(out, "mask.csv"), new_mask)
    eval_mask = new_mask * (1.0 - mask)
    dt.write_mask_csv(os.path.join(out, "eval_mask.csv"), eval_mask)
    if pattern.kind == "block":
        dt.write_events_jsonl(os.path.join(out, "events.jsonl"), pattern.events)
    observed_before = float((1.0 - mask).sum())
    _write_json(
        os.path.join(out, "mask_stats.json"),
        {
            "masked_fraction": float(new_mask.mean()),
            "newly_masked_fraction_of_observed": float(eval_mask.sum() / observed_before) if observed_before else 0.0,
            "n_events": len(pattern.events),
        },
    )


def _fit(cfg: dict, X: np.ndarray) -> HSPGNNImputer:
    adjacency = go.load_adjacency_csv(cfg["adjacency"]).adjacency if cfg.get("adjacency") else None
    return HSPGNNImputer(adjacency=adjacency, **_estimator_kwargs(cfg)).fit(X)


def cmd_train(cfg: dict, out: str) -> None:
    X = _load_series_nan(cfg["series"])
    est = _fit(cfg, X)
    extras = {"scaler.mean": est.scaler_.mean_, "scaler.scale": est.scaler_.scale_}
    checkpoint_save(est.model_, os.path.join(out, "checkpoint.hspg"), extras)
    rows = est.report_.to_rows()
    with open(os.path.join(out, "loss_curves.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "val_loss"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    _write_json(
        os.path.join(out, "train_report.json"),
        {"best_epoch": est.report_.best_epoch, "best_val_loss": est.report_.best_val, "epochs": len(rows)},
    )


def load_imputer(path) -> HSPGNNImputer:
    model, extras = checkpoint_load(path, with_extras=True)
    scaler = dt.Standardizer(extras.get("scaler.mean"), extras.get("scaler.scale"))
    if scaler.mean_ is None or scaler.scale_ is None:
        scaler = dt.Standardizer(np.zeros(model.config.n_nodes), np.ones(model.config.n_nodes))
    return HSPGNNImputer.from_model(model, scaler)


def cmd_impute(cfg: dict, out: str) -> None:
    X = _load_series_nan(cfg["series"])
    est = load_imputer(cfg["checkpoint"])
    dt.write_series_csv(os.path.join(out, "imputed.csv"), est.transform(X))


def cmd_evaluate(cfg: dict, out: str) -> None:
    imputed, m1 = dt.load_series_csv(cfg["imputed"])
    truth, m2 = dt.load_series_csv(cfg["ground_truth"])
    if m1.any() or m2.any():
        raise ValidationError("imputed and ground-truth files must be complete")
    mask = dt.load_mask_csv(cfg["mask"])
    _write_json(os.path.join(out, "metrics.json"), imputation_metrics(truth, imputed, mask))


def ablation_variants(cfg: dict) -> list:
    """``(name, K, overrides)`` rows: full model, each ablation, then the K sweep."""
    rows = [("full", cfg["K"], {})]
    for name in cfg["variants"]:
        if name not in ABLATIONS:
            raise ValidationError(f"unknown ablation variant {name!r}; choose from {sorted(ABLATIONS)}")
        over = dict(ABLATIONS[name])
        if name == "vanilla_pinn":
            over["pinn_weight"] = cfg["pinn_penalty"]
        rows.append((name, cfg["K"], over))
    for k in cfg["k_hops"]:
        rows.append((f"k_hops={json.dumps(k)}", k, {}))
    return rows


def cmd_ablate(cfg: dict, out: str) -> None:
    X = _load_series_nan(cfg["series"])
    truth, _ = dt.load_series_csv(cfg["ground_truth"])
    _, series_mask = split_missing(X)
    eval_mask = series_mask if cfg["mask"] is None else dt.load_mask_csv(cfg["mask"])
    report = []
    for name, K, over in ablation_variants(cfg):
        run = dict(cfg, K=K, **over)
        est = _fit(run, X)
        metrics = imputation_metrics(truth, est.transform(X), eval_mask)
        report.append({"variant": name, "K": K, **metrics})
        logger.info("ablation %s: mae=%.6f", name, metrics["mae"])
    _write_json(os.path.join(out, "ablation.json"), report)


def cmd_explain(cfg: dict, out: str) -> None:
    X = _load_series_nan(cfg["series"])
    est = load_imputer(cfg["checkpoint"])
    model = est.model_
    values, mask = split_missing(X)
    z = est.scaler_.transform(values) * (1.0 - mask)
    report = ex.missing_impact(model, z, mask)
    adjacency = None if model.graph is None else model.graph.adjacency
    feats = ex.node_features(dt.preprocess(z, mask), adjacency)
    flows = ex.FlowStack.init(feats.shape[1], cfg["flow_K"], seed=cfg["seed"])
    fit = ex.fit_flows(
        flows, feats, report.impact, cfg["flow_lr"], cfg["flow_batch"], cfg["flow_steps"], cfg["seed"],
        cfg["objective_sign"],
    )
    report.density = ex.impact_density(flows, feats, report.impact, seed=cfg["seed"])
    _write_json(os.path.join(out, "impact.json"), report.to_records())
    _write_json(os.path.join(out, "flow_report.json"), {"objective": fit.objective, "K": flows.K})
    laps = model.dynamic_laplacians(dt.preprocess(z, mask), mask)
    ex.export_dynamic_graphs(laps, os.path.join(out, "dynamic_graphs"))
    if 1 in model.config.hops:
        ex.optical_flow(model, laps).to_csv(os.path.join(out, "optical_flow.csv"))
    else:
        logger.warning("hop 1 not configured; optical flow skipped")


def cmd_bench(cfg: dict, out: str) -> None:
    results = []
    for M in cfg["M_values"]:
        results.extend(bn.bench_temporal_mixing(M, cfg["N"], cfg["order"], cfg["repeats"], seed=cfg["seed"]))
    bn.write_bench_report(results, os.path.join(out, "bench.json"))


COMMANDS = {
    "synth": cmd_synth,
    "mask": cmd_mask,
    "train": cmd_train,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hspgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0] if fn.__doc__ else name)
        p.add_argument("--config", help="JSON config file (defaults apply to omitted keys)")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def run(command: str, config_path: str | None, out: str) -> None:
    user, base = {}, os.getcwd()
    if config_path is not None:
        try:
            with open(config_path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        base = os.path.dirname(os.path.abspath(config_path))
    cfg = resolve_config(command, user, base)
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "resolved_config.json"), {"command": command, **cfg})
    COMMANDS[command](cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run(args.command, args.config, args.out)
    except (HSPGNNError, OSError, ValueError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
