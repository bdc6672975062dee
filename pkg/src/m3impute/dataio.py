"""Table ingestion, masked min-max scaling and synthetic missingness masks.

Masks are boolean ``(n, m)`` arrays with ``True`` marking an observed cell.
Every generator is a pure function of its inputs and ``seed`` (an int or a
``numpy.random.Generator``).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit

from .exceptions import CalibrationError, DomainError, SchemaError, TableFormatError
from .seeding import as_generator

CONTINUOUS = "continuous"
DISCRETE = "discrete"
DATA_DIR_ENV = "M3IMPUTE_DATA_DIR"


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = CONTINUOUS
    classes: int | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == DISCRETE and (self.classes is None or self.classes < 2):
            raise SchemaError(f"discrete column {self.name!r} needs classes >= 2")


@dataclass(frozen=True)
class DatasetSchema:
    """Column layout of a table file.

    ``columns`` lists every column in file order. ``target``, when set, names
    a label column that is kept out of the imputation matrix. ``delimiter``
    ``None`` splits on runs of whitespace; ``header`` ``None`` auto-detects.
    """

    columns: tuple[ColumnSpec, ...]
    target: str | None = None
    name: str = ""
    delimiter: str | None = ","
    header: bool | None = None
    filenames: tuple[str, ...] = field(default=())

    def __post_init__(self):
        names = [c.name for c in self.columns]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate column names: {dupes}")
        if self.target is not None and self.target not in names:
            raise SchemaError(f"target {self.target!r} is not a column")

    @property
    def features(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.name != self.target)

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.features]

    @property
    def n_classes(self) -> np.ndarray:
        """Class count per feature column, 0 for continuous ones."""
        return np.array([c.classes or 0 for c in self.features], dtype=np.int64)

    @property
    def discrete(self) -> np.ndarray:
        return self.n_classes > 0

    @classmethod
    def continuous(cls, names, target=None, **kwargs) -> DatasetSchema:
        return cls(tuple(ColumnSpec(n) for n in names), target=target, **kwargs)

    @classmethod
    def from_dict(cls, spec: dict) -> DatasetSchema:
        try:
            columns = tuple(ColumnSpec(**c) for c in spec["columns"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        return cls(
            columns,
            target=spec.get("target"),
            name=spec.get("name", ""),
            delimiter=spec.get("delimiter", ","),
            header=spec.get("header"),
            filenames=tuple(spec.get("filenames", ())),
        )

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "header": self.header,
            "delimiter": self.delimiter,
            "columns": [
                {"name": c.name, "kind": c.kind, **({"classes": c.classes} if c.classes else {})}
                for c in self.columns
            ],
            "target": self.target,
        }
        if self.filenames:
            out["filenames"] = list(self.filenames)
        return out

    @classmethod
    def load(cls, path) -> DatasetSchema:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass
class Dataset:
    """Feature matrix in schema order plus the optional label vector."""

    values: np.ndarray
    schema: DatasetSchema
    target: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _read_rows(path, delimiter):
    with open(path, encoding="utf-8", newline="") as fh:
        if delimiter is None:
            rows = [(i, line.split()) for i, line in enumerate(fh, start=1)]
        else:
            rows = list(enumerate(csv.reader(fh, delimiter=delimiter), start=1))
    return [(i, [cell.strip() for cell in row]) for i, row in rows if any(c.strip() for c in row)]


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, schema: DatasetSchema | None = None) -> Dataset:
    """Read a table file into a :class:`Dataset`.

    Without a schema every column is treated as continuous, named from the
    header when one is present.

    Raises
    ------
    TableFormatError
        A row has the wrong number of fields.
    SchemaError
        A cell does not fit its column kind, or header names do not match.
    """
    delimiter = schema.delimiter if schema is not None else ","
    rows = _read_rows(path, delimiter)
    if not rows:
        raise TableFormatError(f"{path}: no data rows")
    header = schema.header if schema is not None else None
    if header is None:
        header = not all(_is_number(c) for c in rows[0][1])
    names = rows[0][1] if header else None
    body = rows[1:] if header else rows
    if schema is None:
        names = names or [f"x{j}" for j in range(len(rows[0][1]))]
        schema = DatasetSchema.continuous(names)

    if names is not None:
        missing = [c.name for c in schema.columns if c.name not in names]
        if missing:
            raise SchemaError(f"{path}: header lacks columns {missing}")
        order = [names.index(c.name) for c in schema.columns]
        width = len(names)
    else:
        order = list(range(len(schema.columns)))
        width = len(schema.columns)

    table = np.empty((len(body), len(schema.columns)))
    for r, (lineno, row) in enumerate(body):
        if len(row) != width:
            raise TableFormatError(
                f"{path}: line {lineno} has {len(row)} fields, expected {width}"
            )
        for j, (col, src) in enumerate(zip(schema.columns, order)):
            text = row[src]
            try:
                value = float(text)
            except ValueError:
                raise SchemaError(
                    f"{path}: line {lineno}, column {col.name!r}: {text!r} is not numeric"
                ) from None
            if not math.isfinite(value):
                raise SchemaError(f"{path}: line {lineno}, column {col.name!r}: non-finite value")
            if col.kind == DISCRETE and (value != int(value) or not 0 <= value < col.classes):
                raise SchemaError(
                    f"{path}: line {lineno}, column {col.name!r}: {text!r} is not a class "
                    f"index in [0, {col.classes})"
                )
            table[r, j] = value

    names = [c.name for c in schema.columns]
    keep = [j for j, n in enumerate(names) if n != schema.target]
    target = table[:, names.index(schema.target)] if schema.target else None
    return Dataset(np.ascontiguousarray(table[:, keep]), schema, target)


def bundled_schema(name: str) -> DatasetSchema:
    ref = resources.files("m3impute") / "datasets" / f"{name}.json"
    if not ref.is_file():
        raise FileNotFoundError(f"no bundled schema named {name!r}")
    return DatasetSchema.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def load_dataset(name: str, data_dir=None) -> Dataset:
    """Load a named benchmark table.

    The CSV is looked up in ``data_dir``, then ``$M3IMPUTE_DATA_DIR``, then
    the copies shipped with the package.
    """
    schema = bundled_schema(name)
    candidates = (f"{name}.csv",) + schema.filenames
    dirs = [d for d in (data_dir, os.environ.get(DATA_DIR_ENV)) if d]
    dirs.append(resources.files("m3impute") / "datasets")
    for d in dirs:
        for fname in candidates:
            path = Path(str(d)) / fname
            if path.is_file():
                return load_csv(path, schema)
    raise FileNotFoundError(
        f"dataset {name!r} not found; place one of {list(candidates)} in a directory "
        f"passed as data_dir or named by ${DATA_DIR_ENV}"
    )


# Scaling


@dataclass
class ScalerParams:
    """Per-column min/max learned from observed entries.

    Discrete columns pass through unchanged; their min/max are left at 0.
    """

    mins: np.ndarray
    maxs: np.ndarray
    discrete: np.ndarray

    def _span(self):
        span = self.maxs - self.mins
        return np.where(span > 0, span, 1.0)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = (X - self.mins) / self._span()
        out[:, self.maxs == self.mins] = 0.0
        out[:, self.discrete] = X[:, self.discrete]
        return out

    def inverse_transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = X * self._span() + self.mins
        out[:, self.discrete] = X[:, self.discrete]
        return out


def fit_minmax(D: np.ndarray, M: np.ndarray, discrete=None) -> ScalerParams:
    D = np.asarray(D, dtype=np.float64)
    M = np.asarray(M, dtype=bool)
    discrete = np.zeros(D.shape[1], bool) if discrete is None else np.asarray(discrete, bool)
    empty = ~M.any(axis=0) & ~discrete
    if empty.any():
        raise DomainError(f"columns {np.flatnonzero(empty).tolist()} have no observed entries")
    mins = np.where(M, D, np.inf).min(axis=0)
    maxs = np.where(M, D, -np.inf).max(axis=0)
    mins[discrete] = 0.0
    maxs[discrete] = 0.0
    return ScalerParams(mins, maxs, discrete)


def fit_apply_minmax(D, M, discrete=None) -> tuple[np.ndarray, ScalerParams]:
    """Scale continuous columns to [0, 1] using only observed entries.

    Unobserved cells are transformed with the same parameters, so they may
    fall outside [0, 1]. Constant columns map to 0.
    """
    params = fit_minmax(D, M, discrete)
    return params.transform(D), params


def unit_values(X: np.ndarray, n_classes) -> np.ndarray:
    """Map scaled data to a common [0, 1] range, discrete codes as code / (C - 1)."""
    n_classes = np.asarray(n_classes)
    out = np.array(X, dtype=np.float64)
    disc = n_classes > 0
    out[:, disc] = out[:, disc] / (n_classes[disc] - 1)
    return out


# Mask generation


def observed_fraction(M: np.ndarray) -> float:
    return float(np.mean(M))


def _check_ratio(ratio):
    if not 0.0 <= ratio < 1.0:
        raise DomainError(f"missing ratio must lie in [0, 1), got {ratio}")


def ensure_connected(M: np.ndarray, seed) -> np.ndarray:
    """Un-mask one random cell in every fully missing row, then every fully missing column."""
    rng = as_generator(seed)
    M = np.array(M, dtype=bool)
    n, m = M.shape
    for i in np.flatnonzero(~M.any(axis=1)):
        M[i, rng.integers(m)] = True
    for j in np.flatnonzero(~M.any(axis=0)):
        M[rng.integers(n), j] = True
    return M


def _mcar_missing(shape, ratio, rng):
    u = rng.uniform(size=shape)
    return (u <= ratio) & (ratio > 0)


def gen_mcar(n: int, m: int, ratio: float, seed, *, connect: bool = True) -> np.ndarray:
    """Each cell is missing independently when its uniform draw is <= ``ratio``."""
    _check_ratio(ratio)
    rng = as_generator(seed)
    M = ~_mcar_missing((n, m), ratio, rng)
    return ensure_connected(M, rng) if connect else M


def calibrate_bias(scores: np.ndarray, target: float, *, low=-30.0, high=30.0,
                   tol=0.005, max_iter=200) -> float:
    """Find ``b`` with ``mean(sigmoid(scores + b))`` equal to ``target``.

    Bisection runs to machine precision; failure to land within ``tol`` or
    to bracket the target raises :class:`CalibrationError`.
    """
    def rate(b):
        return float(np.mean(expit(scores + b)))

    if not rate(low) <= target <= rate(high):
        raise CalibrationError(
            f"missing rate {target:.4f} is outside the reachable range "
            f"[{rate(low):.4g}, {rate(high):.4g}]"
        )
    for _ in range(max_iter):
        mid = 0.5 * (low + high)
        if rate(mid) < target:
            low = mid
        else:
            high = mid
        if high - low < 1e-12:
            break
    b = 0.5 * (low + high)
    if abs(rate(b) - target) > tol:
        raise CalibrationError(f"bias calibration stalled at rate {rate(b):.4f}")
    return b


@dataclass
class MarModel:
    """Logistic missingness model driven by a fully observed column subset."""

    observed_columns: np.ndarray
    masked_columns: np.ndarray
    weights: np.ndarray
    bias: float
    probabilities: np.ndarray  # per row, shared by all masked columns


def fit_mar_model(D, ratio, seed, *, observed_fraction=0.3, weight_scale=1.0) -> MarModel:
    """Draw the column split and weights, then calibrate the bias.

    The masked columns carry an adjusted rate ``ratio * m / (m - k)`` so the
    overall expected missing rate over all ``m`` columns equals ``ratio``.
    """
    D = np.asarray(D, dtype=np.float64)
    n, m = D.shape
    if m < 2:
        raise DomainError("MAR masking needs at least two columns")
    _check_ratio(ratio)
    rng = as_generator(seed)
    k = min(m - 1, max(1, math.ceil(observed_fraction * m)))
    perm = rng.permutation(m)
    obs, masked = np.sort(perm[:k]), np.sort(perm[k:])
    weights = rng.normal(scale=weight_scale, size=k) if weight_scale > 0 else np.zeros(k)
    x_obs = D[:, obs]
    lo, hi = x_obs.min(axis=0), x_obs.max(axis=0)
    x_obs = np.where(hi > lo, (x_obs - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    scores = x_obs @ weights
    if ratio == 0:
        return MarModel(obs, masked, weights, -np.inf, np.zeros(n))
    adjusted = ratio * m / (m - k)
    bias = calibrate_bias(scores, adjusted)
    return MarModel(obs, masked, weights, bias, expit(scores + bias))


def _mar_missing(D, ratio, rng, observed_fraction, weight_scale):
    model = fit_mar_model(
        D, ratio, rng, observed_fraction=observed_fraction, weight_scale=weight_scale
    )
    n, m = np.shape(D)
    missing = np.zeros((n, m), dtype=bool)
    u = rng.uniform(size=(n, len(model.masked_columns)))
    missing[:, model.masked_columns] = u <= model.probabilities[:, None]
    return missing


def gen_mar(D, ratio, seed, *, observed_fraction=0.3, weight_scale=1.0,
            connect: bool = True) -> np.ndarray:
    """Missing at random: masking depends only on a fully observed column subset.

    A random ``ceil(observed_fraction * m)`` columns stay fully observed. In
    the rest, row ``i`` is masked with probability
    ``sigmoid(w . x_obs(i) + b)``, ``w ~ N(0, weight_scale**2)``.
    """
    rng = as_generator(seed)
    M = ~_mar_missing(D, ratio, rng, observed_fraction, weight_scale)
    return ensure_connected(M, rng) if connect else M


def mnar_subrate(ratio: float) -> float:
    """Equal MAR and MCAR sub-rates composing to ``ratio``."""
    return 1.0 - math.sqrt(1.0 - ratio)


def gen_mnar(D, ratio, seed, *, observed_fraction=0.3, weight_scale=1.0,
             connect: bool = True) -> np.ndarray:
    """MAR masking followed by MCAR masking of every surviving cell.

    The MCAR pass also hits the columns the MAR pass kept whole, so
    missingness there no longer reveals nothing about the other columns.
    """
    _check_ratio(ratio)
    rng = as_generator(seed)
    r = mnar_subrate(ratio)
    missing = _mar_missing(D, r, rng, observed_fraction, weight_scale)
    missing |= _mcar_missing(missing.shape, r, rng)
    M = ~missing
    return ensure_connected(M, rng) if connect else M


MECHANISMS = ("mcar", "mar", "mnar")


def generate_mask(mechanism: str, D, ratio, seed, **kwargs) -> np.ndarray:
    mechanism = mechanism.lower()
    if mechanism == "mcar":
        n, m = np.shape(D)
        return gen_mcar(n, m, ratio, seed, **kwargs)
    if mechanism == "mar":
        return gen_mar(D, ratio, seed, **kwargs)
    if mechanism == "mnar":
        return gen_mnar(D, ratio, seed, **kwargs)
    raise DomainError(f"unknown mechanism {mechanism!r}; expected mcar, mar or mnar")


def sample_message_edges(M: np.ndarray, keep_fraction: float, seed) -> np.ndarray:
    """Uniformly keep ``round(keep_fraction * |E|)`` observed cells, returned as a mask."""
    if not 0.0 < keep_fraction <= 1.0:
        raise DomainError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    M = np.asarray(M, dtype=bool)
    if keep_fraction == 1.0:
        return M.copy()
    flat = np.flatnonzero(M)
    k = int(math.floor(keep_fraction * flat.size + 0.5))
    chosen = as_generator(seed).choice(flat, size=k, replace=False)
    kept = np.zeros(M.size, dtype=bool)
    kept[chosen] = True
    return kept.reshape(M.shape)


# Mask files


def save_mask(path, M: np.ndarray) -> None:
    np.savetxt(path, np.asarray(M, dtype=np.int8), fmt="%d", delimiter=",")


def load_mask(path, shape=None) -> np.ndarray:
    try:
        raw = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise TableFormatError(f"{path}: {exc}") from exc
    if not np.isin(raw, (0, 1)).all():
        raise SchemaError(f"{path}: mask entries must be 0 or 1")
    if shape is not None and raw.shape != tuple(shape):
        raise SchemaError(f"{path}: mask shape {raw.shape} does not match data {tuple(shape)}")
    return raw.astype(bool)
