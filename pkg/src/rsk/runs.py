"""End-to-end runs shared by the command line and the acceptance tests."""

from __future__ import annotations

import dataclasses
import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .data import generate_clusters, load_features, split_per_class
from .evaluation import MetricTable, evaluate_split
from .model import Embedder, save_checkpoint
from .train import StepResult, train

logger = logging.getLogger(__name__)

def prepare_data(cfg: RunConfig):
    """(train features, train labels, eval features, eval labels)."""
    if cfg.dataset == "synthetic":
        x, y = generate_clusters(cfg.num_classes, cfg.samples_per_class, cfg.input_dim, cfg.noise, cfg.data_seed)
        tr, te = split_per_class(y, cfg.holdout_per_class, cfg.data_seed)
        return x[tr], y[tr], x[te], y[te]
    x, y = load_features(cfg.dataset)
    if cfg.eval_dataset:
        xe, ye = load_features(cfg.eval_dataset)
    else:
        xe, ye = x, y
    return x, y, xe, ye

def metric_records(table: MetricTable, seed: int, config_hash: str) -> list[dict]:
    records = []
    for row in table.rows:
        records.append({"metric": "r@k", "k": row.k, "value": row.r_at_k, "seed": seed, "config_hash": config_hash})
        records.append({"metric": "recall@k", "k": row.k, "value": row.recall_at_k, "seed": seed, "config_hash": config_hash})
    return records

def write_report(out_dir, table: MetricTable, seed: int, config_hash: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.tsv").write_text(table.to_text())
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for rec in metric_records(table, seed, config_hash):
            fh.write(json.dumps(rec) + "\n")

@dataclass
class TrainOutcome:
    model: Embedder
    losses: list[float]
    metrics: MetricTable
    config_hash: str
    expanded_size: int

def run_training(cfg: RunConfig, out_dir=None) -> TrainOutcome:
    xtr, ytr, xte, yte = prepare_data(cfg)
    if xtr.shape[1] != cfg.input_dim:
        logger.info("input_dim taken from data: %d", xtr.shape[1])
        cfg = dataclasses.replace(cfg, input_dim=int(xtr.shape[1]))
    model = Embedder.init(cfg.input_dim, cfg.embed_dim, cfg.hidden, cfg.bias, cfg.seed)
    tcfg = cfg.train_config()
    chash = cfg.hash()
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    sizes = []

    def on_step(it: int, res: StepResult) -> None:
        sizes.append(res.expanded_size)
        rec = {"iteration": it + 1, "loss": res.loss, "batch_size": res.batch_size, "expanded_size": res.expanded_size}
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            rec["r@1"] = evaluate_split(model, xte, yte, (1,)).r_at(1)
            logger.info("iter %d loss %.5f r@1 %.4f", it + 1, res.loss, rec["r@1"])
        if it == 0:
            logger.info("batch size %d, expanded batch size %d", res.batch_size, res.expanded_size)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")

    try:
        opt, losses = train(model, xtr, ytr, tcfg, callback=on_step)
    finally:
        if log_fh is not None:
            log_fh.close()
    table = evaluate_split(model, xte, yte, cfg.eval_ks)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.npz", model, opt, chash, cfg.to_dict())
        write_report(out_dir, table, cfg.seed, chash)
    return TrainOutcome(model, losses, table, chash, sizes[-1])

SWEEPS = {
    "tau1": ("tau1", [0.1, 0.5, 1.0, 2.0, 5.0]),
    "batch_size": ("batch_size", [16, 32, 64, 128]),
    "simix": ("simix", [False, True]),
}

def parse_sweep(text: str):
    """``name`` or ``name=v1,v2,...``; returns (config key, values)."""
    name, _, values = text.partition("=")
    name = name.strip()
    if name not in SWEEPS:
        raise ValueError(f"unknown sweep {name!r}; choose from {sorted(SWEEPS)}")
    key, default = SWEEPS[name]
    if not values:
        return key, list(default)
    if key == "simix":
        return key, [v.strip().lower() in ("1", "true", "on", "yes") for v in values.split(",")]
    cast = float if key == "tau1" else int
    return key, [cast(v) for v in values.split(",")]

@dataclass
class AblationRow:
    key: str
    value: object
    seed: int
    r_at_1: float
    config_hash: str

def run_ablation(cfg: RunConfig, key: str, values, seeds) -> list[AblationRow]:
    rows = []
    for value in values:
        for seed in seeds:
            ks = tuple(sorted(set(cfg.eval_ks) | {1}))
            run_cfg = dataclasses.replace(cfg, **{key: value, "seed": seed, "data_seed": seed, "eval_every": 0, "eval_ks": ks})
            out = run_training(run_cfg.validate())
            rows.append(AblationRow(key, value, seed, out.metrics.r_at(1), out.config_hash))
            logger.info("%s=%s seed=%d r@1=%.4f", key, value, seed, rows[-1].r_at_1)
    return rows

def median_by_value(rows: list[AblationRow]) -> dict:
    grouped: dict = {}
    for r in rows:
        grouped.setdefault(r.value, []).append(r.r_at_1)
    return {v: statistics.median(rs) for v, rs in grouped.items()}

def ablation_text(rows: list[AblationRow], sep: str = "\t") -> str:
    lines = [sep.join(["setting", "value", "seed", "r@1", "config_hash"])]
    for r in rows:
        lines.append(sep.join([r.key, str(r.value), str(r.seed), f"{r.r_at_1:.6f}", r.config_hash]))
    for v, med in median_by_value(rows).items():
        lines.append(sep.join([rows[0].key, str(v), "median", f"{med:.6f}", "-"]))
    return "\n".join(lines) + "\n"
