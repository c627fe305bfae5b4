"""Experiment grid: repeated seeded runs, JSON run records, summary tables.

Seeds for repeat ``r`` of an experiment with base seed ``b``:

* split seed   = b + r
* init seed    = hash64(b, r, "init")
* shuffle seed = hash64(b, r, "shuffle")

where ``hash64(b, r, tag)`` is the first 8 bytes (big-endian) of
SHA-256 over the UTF-8 string ``f"{b}:{r}:{tag}"``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .graphio import load_dataset, resolve_dataset_dir, split_dataset
from .training import ConfigError, ModelConfig, TrainConfig, train_run

log = logging.getLogger(__name__)

RECORD_SCHEMA = "grapool.run/1"
ABLATION_DATASETS = ("PROTEINS", "ENZYMES", "Mutagenicity", "OHSU", "IMDB-BINARY")
CSV_COLUMNS = [
    "dataset",
    "pooling",
    "selection",
    "aggregator",
    "aux_loss",
    "mean_acc",
    "std_acc",
    "n_runs",
    "n_failed",
]


class NoResultsError(RuntimeError):
    pass


def hash64(base: int, repeat: int, tag: str) -> int:
    digest = hashlib.sha256(f"{base}:{repeat}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_seeds(base: int, repeat: int) -> dict[str, int]:
    return {
        "split": base + repeat,
        "init": hash64(base, repeat, "init"),
        "shuffle": hash64(base, repeat, "shuffle"),
    }


@dataclass
class ExperimentConfig:
    datasets: list[str]
    models: list[ModelConfig] = field(default_factory=lambda: [ModelConfig()])
    repeats: int = 10
    base_seed: int = 0
    train: dict = field(default_factory=dict)
    data_dir: str | None = None
    out_dir: str = "results"

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.datasets:
            raise ConfigError("no datasets given")
        unknown = set(self.train) - {"lr", "batch_size", "max_epochs", "patience"}
        if unknown:
            raise ConfigError(f"unknown train overrides {sorted(unknown)}")
        for m in self.models:
            m.resolved()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        try:
            datasets = raw.pop("datasets")
        except KeyError:
            raise ConfigError("config needs a 'datasets' list") from None
        if isinstance(datasets, str):
            datasets = [datasets]
        models = [ModelConfig(**m) for m in raw.pop("models", [{}])]
        known = {"repeats", "base_seed", "train", "data_dir", "out_dir"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(datasets=list(datasets), models=models, **raw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            return cls.from_dict(raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "datasets": self.datasets,
            "models": [_model_echo(m) for m in self.models],
            "repeats": self.repeats,
            "base_seed": self.base_seed,
            "train": self.train,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
        }

    def data_root(self) -> str:
        return self.data_dir or os.environ.get("GRAPOOL_DATA_DIR", "data")

    def train_config(self, shuffle_seed: int) -> TrainConfig:
        return TrainConfig(seed=shuffle_seed, **self.train)


def _model_echo(m: ModelConfig) -> dict:
    return {k: v for k, v in asdict(m).items() if v is not None}


def record_path(out_dir: Path, dataset: str, model: ModelConfig, repeat: int) -> Path:
    return out_dir / f"{dataset}__{model.signature()}__r{repeat:03d}.json"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


@lru_cache(maxsize=8)
def _cached_dataset(name: str, root: str):
    return load_dataset(name, root)


def execute_run(task: dict) -> dict:
    """Run one (dataset, model, repeat) task and write its record."""
    ds = _cached_dataset(task["dataset"], task["data_root"])
    model = ModelConfig(**task["model"])
    seeds = derive_seeds(task["base_seed"], task["repeat"])
    split = split_dataset(ds, seeds["split"])
    tc = TrainConfig(seed=seeds["shuffle"], **task["train"])
    result = train_run(ds, split, model, tc, init_seed=seeds["init"])
    resolved = model.resolved()
    outcome = result.to_dict()
    if math.isnan(outcome["test_acc"]):
        outcome["test_acc"] = None
    record = {
        "schema": RECORD_SCHEMA,
        "dataset": task["dataset"],
        "repeat": task["repeat"],
        "base_seed": task["base_seed"],
        "seeds": seeds,
        "model": _model_echo(resolved),
        "signature": resolved.signature(),
        "train": asdict(tc),
        "split_sizes": [len(split.train), len(split.val), len(split.test)],
        "result": outcome,
    }
    _atomic_write(Path(task["out"]), json.dumps(record, indent=1))
    return record


def plan_runs(config: ExperimentConfig, force: bool = False) -> list[dict]:
    out_dir = Path(config.out_dir)
    root = config.data_root()
    for name in config.datasets:
        resolve_dataset_dir(root, name)
    tasks = []
    for name in config.datasets:
        for model in config.models:
            for r in range(config.repeats):
                out = record_path(out_dir, name, model, r)
                if out.exists() and not force:
                    continue
                tasks.append(
                    {
                        "dataset": name,
                        "data_root": str(root),
                        "model": _model_echo(model),
                        "train": dict(config.train),
                        "repeat": r,
                        "base_seed": config.base_seed,
                        "out": str(out),
                    }
                )
    return tasks


def run_experiment(config: ExperimentConfig, jobs: int = 1, force: bool = False) -> list[dict]:
    """Execute every pending run; returns the records written in this call."""
    tasks = plan_runs(config, force)
    log.info("%d runs pending in %s", len(tasks), config.out_dir)
    if jobs <= 1 or len(tasks) <= 1:
        return [execute_run(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(execute_run, tasks))


def load_records(out_dir: str | os.PathLike) -> list[dict]:
    records = []
    for p in sorted(Path(out_dir).glob("*.json")):
        with open(p, encoding="utf-8") as fh:
            rec = json.load(fh)
        if rec.get("schema") == RECORD_SCHEMA:
            records.append(rec)
    return records


@dataclass
class SummaryRow:
    dataset: str
    pooling: str
    selection: str
    aggregator: str
    aux_loss: str
    mean_acc: float
    std_acc: float
    n_runs: int
    n_failed: int

    def cell(self) -> str:
        if math.isnan(self.mean_acc):
            return "n/a"
        return f"{100 * self.mean_acc:.2f}±{100 * self.std_acc:.2f}"


@dataclass
class SummaryTable:
    rows: list[SummaryRow]


def aggregate_results(out_dir: str | os.PathLike) -> SummaryTable:
    """Mean and population std of test accuracy per (dataset, config)."""
    records = load_records(out_dir)
    if not records:
        raise NoResultsError(f"no run records in {out_dir}")
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        groups.setdefault((rec["dataset"], rec["signature"]), []).append(rec)
    rows = []
    for (dataset, _), recs in sorted(groups.items()):
        model = ModelConfig(**recs[0]["model"]).resolved()
        ok = [r["result"]["test_acc"] for r in recs if not r["result"]["failed"]]
        rows.append(
            SummaryRow(
                dataset=dataset,
                pooling=model.pooling,
                selection=model.selection or "",
                aggregator=model.aggregator or "",
                aux_loss=model.aux_loss,
                mean_acc=float(np.mean(ok)) if ok else float("nan"),
                std_acc=float(np.std(ok)) if ok else float("nan"),
                n_runs=len(ok),
                n_failed=len(recs) - len(ok),
            )
        )
    return SummaryTable(rows)


def summary_csv(summary: SummaryTable) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for row in summary.rows:
        vals = asdict(row)
        lines.append(",".join(repr(vals[c]) if isinstance(vals[c], float) else str(vals[c]) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def summary_markdown(summary: SummaryTable) -> str:
    head = "| Dataset | Pooling | Selection | Aggregator | Aux loss | Accuracy (%) | Runs | Failed |"
    lines = [head, "|" + "---|" * 8]
    for r in summary.rows:
        lines.append(
            f"| {r.dataset} | {r.pooling} | {r.selection or '-'} | {r.aggregator or '-'} "
            f"| {r.aux_loss} | {r.cell()} | {r.n_runs} | {r.n_failed} |"
        )
    return "\n".join(lines) + "\n"


def read_summary_csv(path: str | os.PathLike) -> SummaryTable:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            rows.append(
                SummaryRow(
                    dataset=raw["dataset"],
                    pooling=raw["pooling"],
                    selection=raw["selection"],
                    aggregator=raw["aggregator"],
                    aux_loss=raw["aux_loss"],
                    mean_acc=float(raw["mean_acc"]),
                    std_acc=float(raw["std_acc"]),
                    n_runs=int(raw["n_runs"]),
                    n_failed=int(raw["n_failed"]),
                )
            )
    return SummaryTable(rows)


def emit_tables(summary: SummaryTable, out_dir: str | os.PathLike, formats=("csv", "markdown")) -> list[Path]:
    if not summary.rows:
        raise NoResultsError("empty summary")
    out_dir = Path(out_dir)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path, text = out_dir / "summary.csv", summary_csv(summary)
        elif fmt in ("markdown", "md"):
            path, text = out_dir / "summary.md", summary_markdown(summary)
        else:
            raise ValueError(f"unknown table format {fmt!r}")
        _atomic_write(path, text)
        written.append(path)
    return written


def ablation_matrix(kind: str, datasets=ABLATION_DATASETS, **common) -> list[ExperimentConfig]:
    """One experiment per dataset, varying a single SpaPool component."""
    base = ModelConfig(pooling="spapool").resolved()
    if kind == "selection":
        models = [replace(base, selection=s) for s in ("topk", "sag")]
    elif kind == "aggregation":
        models = [replace(base, aggregator=a) for a in ("cosine", "scalar", "attention")]
    elif kind == "loss":
        models = [replace(base, aux_loss=a) for a in ("diffpool", "dmon", "mincut")]
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    return [ExperimentConfig(datasets=[d], models=list(models), **common) for d in datasets]
