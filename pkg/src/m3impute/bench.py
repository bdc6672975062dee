"""Experiment runner: masks, scaling, imputation, metrics and reports.

A report is one JSON document (``REPORT_VERSION``) holding the configuration,
one entry per seed and the aggregates. :func:`report_row` flattens it to a CSV
row so several reports can be merged into a table.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import baselines, core, dataio
from .exceptions import ConfigurationError, DomainError, NumericalError
from .seeding import stream

log = logging.getLogger(__name__)

REPORT_VERSION = 1
BASELINES = ("mean", "knn")
METHODS = tuple(core.VARIANTS) + BASELINES
PRESETS = {"desk": 5000, "full": 40000}
RIDGE = 1e-8
CSV_FIELDS = (
    "dataset", "method", "mechanism", "ratio", "n_seeds", "n_failed",
    "mae_x10_mean", "mae_x10_std", "mae_mean", "mae_std", "downstream_mae_mean",
    "train_seconds", "infer_seconds", "partial",
)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one benchmark cell.

    ``dataset`` is a bundled table name or a CSV path; ``schema`` is an
    optional JSON sidecar (bundled names carry their own).
    """

    dataset: str
    mechanism: str = "mcar"
    ratio: float = 0.3
    method: str = "m3"
    schema: str | None = None
    epochs: int = PRESETS["desk"]
    peer_count: int = 5
    epsilon: float = 1e-4
    dim: int = 128
    layers: int = 3
    lr: float = 1e-3
    knn_k: int = 5
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    data_dir: str | None = None
    mask_files: list[str] | None = None
    out: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigurationError(f"ratio must lie in [0, 1), got {self.ratio}")
        if not self.seeds:
            raise ConfigurationError("seed list is empty")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.mechanism not in dataio.MECHANISMS:
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}")
        if self.mask_files is not None and len(self.mask_files) != len(self.seeds):
            raise ConfigurationError("need one mask file per seed")
        self.seeds = [int(s) for s in self.seeds]

    @property
    def dataset_name(self) -> str:
        return Path(self.dataset).stem if self.dataset.endswith((".csv", ".data")) else self.dataset

    def model_config(self) -> core.ModelConfig:
        base = core.ModelConfig(dim=self.dim, layers=self.layers, peer_count=self.peer_count,
                                epsilon=self.epsilon)
        return core.with_variant(base, self.method)

    def train_config(self) -> core.TrainConfig:
        return core.TrainConfig(epochs=self.epochs, lr=self.lr)


def load_experiment_data(config: ExperimentConfig) -> dataio.Dataset:
    path = Path(config.dataset)
    if path.suffix in (".csv", ".data") or path.exists():
        schema = dataio.DatasetSchema.load(config.schema) if config.schema else None
        return dataio.load_csv(path, schema)
    return dataio.load_dataset(config.dataset, config.data_dir)


def experiment_mask(config: ExperimentConfig, values, seed: int, index: int = 0) -> np.ndarray:
    if config.mask_files is not None:
        return dataio.load_mask(config.mask_files[index], shape=np.shape(values))
    return dataio.generate_mask(config.mechanism, values, config.ratio, stream(seed, "mask"))


# Metrics


def compute_mae(truth, imputed, M, n_classes=None) -> tuple[float, float]:
    """Mean absolute error over unobserved cells; returns ``(mae, 10 * mae)``.

    Inputs are in scaled space; discrete codes are compared as ``code / (C - 1)``.
    """
    truth, imputed, M = np.asarray(truth), np.asarray(imputed), np.asarray(M, bool)
    if not truth.shape == imputed.shape == M.shape:
        raise DomainError(f"shapes differ: {truth.shape}, {imputed.shape}, {M.shape}")
    if M.all():
        raise DomainError("no missing cells to evaluate")
    if n_classes is not None:
        truth = dataio.unit_values(truth, n_classes)
        imputed = dataio.unit_values(imputed, n_classes)
    mae = float(np.abs(truth - imputed)[~M].mean())
    return mae, 10.0 * mae


def downstream_ols_mae(X, labels) -> float:
    """In-sample MAE of a lightly damped least-squares fit of ``labels`` on ``X`` plus intercept."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    gram = A.T @ A + RIDGE * np.eye(A.shape[1])
    try:
        beta = np.linalg.solve(gram, A.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"least-squares system is singular: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise NumericalError("least-squares solution is not finite")
    return float(np.mean(np.abs(A @ beta - y)))


# Reports


@dataclass
class SeedResult:
    seed: int
    mae: float | None = None
    mae_x10: float | None = None
    downstream_mae: float | None = None
    observed_fraction: float | None = None
    train_seconds: float = 0.0
    infer_seconds: float = 0.0
    final_loss: float | None = None
    loss_trace: str | None = None
    error: str | None = None


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class RunReport:
    config: dict
    seeds: list[SeedResult]
    version: int = REPORT_VERSION
    created: str = ""

    @property
    def completed(self) -> list[SeedResult]:
        return [s for s in self.seeds if s.error is None]

    @property
    def partial(self) -> bool:
        return len(self.completed) < len(self.seeds)

    def aggregate(self) -> dict:
        done = self.completed
        mae_mean, mae_std = _mean_std([s.mae for s in done])
        x10_mean, x10_std = _mean_std([s.mae_x10 for s in done])
        down_mean, down_std = _mean_std([s.downstream_mae for s in done])
        return {
            "mae_mean": mae_mean, "mae_std": mae_std,
            "mae_x10_mean": x10_mean, "mae_x10_std": x10_std,
            "downstream_mae_mean": down_mean, "downstream_mae_std": down_std,
            "train_seconds": float(sum(s.train_seconds for s in self.seeds)),
            "infer_seconds": float(sum(s.infer_seconds for s in self.seeds)),
            "n_failed": len(self.seeds) - len(done),
        }

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "created": self.created,
            "config": self.config,
            "seeds": [asdict(s) for s in self.seeds],
            "aggregate": self.aggregate(),
            "partial": self.partial,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        if d.get("version") != REPORT_VERSION:
            raise ConfigurationError(f"unsupported report version {d.get('version')}")
        return cls(d["config"], [SeedResult(**s) for s in d["seeds"]], d["version"],
                   d.get("created", ""))


def report_row(report: RunReport) -> dict:
    cfg, agg = report.config, report.aggregate()
    name = cfg["dataset"]
    if name.endswith((".csv", ".data")):
        name = Path(name).stem
    return {
        "dataset": name, "method": cfg["method"], "mechanism": cfg["mechanism"],
        "ratio": cfg["ratio"], "n_seeds": len(report.seeds), "n_failed": agg["n_failed"],
        "mae_x10_mean": agg["mae_x10_mean"], "mae_x10_std": agg["mae_x10_std"],
        "mae_mean": agg["mae_mean"], "mae_std": agg["mae_std"],
        "downstream_mae_mean": agg["downstream_mae_mean"],
        "train_seconds": agg["train_seconds"], "infer_seconds": agg["infer_seconds"],
        "partial": report.partial,
    }


def write_report(report: RunReport, path) -> tuple[Path, Path]:
    """Write ``path`` (JSON) and a one-row CSV next to it with the same stem."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerow(report_row(report))
    return path, csv_path


def read_report(path) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


def merge_reports(paths, out) -> list[dict]:
    """Collect the rows of several JSON reports into one CSV table."""
    rows = [report_row(read_report(p)) for p in paths]
    rows.sort(key=lambda r: (r["dataset"], r["mechanism"], r["ratio"], r["method"]))
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


# Running


def _impute(config: ExperimentConfig, scaled, M, n_classes, seed, result: SeedResult):
    if config.method == "mean":
        start = time.perf_counter()
        out = baselines.mean_impute(scaled, M, n_classes).values
        result.infer_seconds = time.perf_counter() - start
        return out, None
    if config.method == "knn":
        start = time.perf_counter()
        out = baselines.knn_impute(scaled, M, config.knn_k, n_classes).values
        result.infer_seconds = time.perf_counter() - start
        return out, None
    fitted = core.fit(scaled, M, n_classes, config.model_config(), config.train_config(), seed)
    result.train_seconds = fitted.train_seconds
    result.final_loss = fitted.losses[-1]
    start = time.perf_counter()
    out = core.predict_matrix(fitted.params, scaled, M, seed)
    result.infer_seconds = time.perf_counter() - start
    return out, fitted.losses


def _write_loss_trace(config, seed, losses):
    if config.out is None or losses is None:
        return None
    path = Path(config.out).with_suffix(f".seed{seed}.loss.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(losses), fmt="%.17g", header="loss", comments="")
    return str(path)


def run_seed(config: ExperimentConfig, data: dataio.Dataset, seed: int, index: int = 0) -> SeedResult:
    result = SeedResult(seed)
    n_classes = data.schema.n_classes
    M = experiment_mask(config, data.values, seed, index)
    result.observed_fraction = dataio.observed_fraction(M)
    scaled, _ = dataio.fit_apply_minmax(data.values, M, data.schema.discrete)
    imputed, losses = _impute(config, scaled, M, n_classes, seed, result)
    result.mae, result.mae_x10 = compute_mae(scaled, imputed, M, n_classes)
    if data.target is not None:
        result.downstream_mae = downstream_ols_mae(dataio.unit_values(imputed, n_classes),
                                                   data.target)
    result.loss_trace = _write_loss_trace(config, seed, losses)
    return result


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Run every seed; a failing seed is recorded and the report marked partial."""
    data = load_experiment_data(config)
    results = []
    for index, seed in enumerate(config.seeds):
        log.info("%s %s %s@%.2f seed %d", config.dataset_name, config.method,
                 config.mechanism, config.ratio, seed)
        try:
            res = run_seed(config, data, seed, index)
        except Exception as exc:  # a failed seed must not sink the rest of the run
            log.warning("seed %d failed: %s", seed, exc)
            res = SeedResult(seed, error=f"{type(exc).__name__}: {exc}")
        else:
            log.info("seed %d: MAE x10 = %.4f", seed, res.mae_x10)
        results.append(res)
    report = RunReport(asdict(config), results,
                       created=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    if config.out:
        write_report(report, config.out)
    return report


def export_masks(config: ExperimentConfig, directory) -> list[Path]:
    """Write the mask every seed of ``config`` would use, one CSV per seed."""
    data = load_experiment_data(config)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, seed in enumerate(config.seeds):
        path = directory / f"{config.dataset_name}_{config.mechanism}_{config.ratio:g}_seed{seed}.csv"
        dataio.save_mask(path, experiment_mask(config, data.values, seed, index))
        paths.append(path)
    return paths

