"""Series ingestion, rolling windows and the offline statistics of the training prefix.

Row indices are 0-based throughout.  A window ending at row ``t`` has history
rows ``t-L+1 .. t`` and future rows ``t+1 .. t+H``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels

JITTER = 1e-8


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass
class Dataset:
    values: np.ndarray
    channel_names: List[str]
    train_len: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise DataError(f"values must be a T x D matrix, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("values contain NaN or inf")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError("channel_names length does not match the number of columns")
        if not 0 < self.train_len < self.values.shape[0]:
            raise DataError(f"train_len={self.train_len} must lie in (0, T={self.values.shape[0]})")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    @property
    def holdout(self) -> int:
        return self.T - self.train_len

    @classmethod
    def from_array(cls, values, holdout: int, channel_names: Optional[Sequence[str]] = None) -> "Dataset":
        values = np.asarray(values, dtype=np.float64)
        names = list(channel_names) if channel_names else [f"ch{i}" for i in range(values.shape[1])]
        return cls(values, names, values.shape[0] - holdout)


@dataclass
class WindowPair:
    history: np.ndarray
    future: np.ndarray
    t: int


@dataclass
class PhysicsBudgets:
    m: np.ndarray
    M: np.ndarray
    v_max: np.ndarray
    a_max: np.ndarray
    lags: np.ndarray
    tau_max: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "m": self.m.tolist(),
                "M": self.M.tolist(),
                "v_max": self.v_max.tolist(),
                "a_max": self.a_max.tolist(),
                "lags": self.lags.astype(int).tolist(),
                "tau_max": int(self.tau_max),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PhysicsBudgets":
        obj = json.loads(text)
        return cls(
            m=np.asarray(obj["m"], dtype=np.float64),
            M=np.asarray(obj["M"], dtype=np.float64),
            v_max=np.asarray(obj["v_max"], dtype=np.float64),
            a_max=np.asarray(obj["a_max"], dtype=np.float64),
            lags=np.asarray(obj["lags"], dtype=np.int64),
            tau_max=int(obj["tau_max"]),
        )


# ------------------------------------------------------------------ I/O


def read_csv_matrix(path, has_header: bool = False) -> Tuple[np.ndarray, List[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if has_header:
        if not rows:
            raise DataError(f"{path}: empty file")
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
    else:
        names = None
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0]) if names is None else len(names)
    values = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: ragged data row {r + 1}: expected {width} fields, found {len(row)}")
        for c, cell in enumerate(row):
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric value {cell!r} at data row {r + 1}, column {c + 1}") from None
    return values, names or [f"ch{i}" for i in range(width)]


def load_csv(path, has_header: bool = False, holdout: Optional[int] = None) -> Dataset:
    """Parse a comma-separated file, one row per timestamp and one column per channel.

    ``holdout`` rows at the end are reserved for testing; the default keeps a
    single row so that the whole file is usable as a prefix.
    """
    values, names = read_csv_matrix(path, has_header)
    if holdout is None:
        holdout = 1
    if not 0 < holdout < values.shape[0]:
        raise DataError(f"holdout={holdout} must lie in (0, T={values.shape[0]})")
    return Dataset(values, names, values.shape[0] - holdout)


def write_csv(path, values: np.ndarray, names: Optional[Sequence[str]] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if names is not None:
            w.writerow(list(names))
        for row in np.atleast_2d(values):
            w.writerow([repr(float(v)) for v in row])


# ------------------------------------------------------------------ windows and splits


def split_train_test(ds: Dataset, holdout: int) -> Tuple[np.ndarray, np.ndarray]:
    if not 0 < holdout < ds.T:
        raise DataError(f"holdout={holdout} must lie in (0, T={ds.T})")
    cut = ds.T - holdout
    return ds.values[:cut], ds.values[cut:]


def window_ends(n_rows: int, L: int, H: int) -> np.ndarray:
    """0-based end rows of every full (history, future) window in ``n_rows`` rows."""
    if n_rows < L + H:
        raise DataError(f"need at least L+H={L + H} rows for one window, got {n_rows}")
    return np.arange(L - 1, n_rows - H)


def make_windows(prefix: np.ndarray, L: int, H: int) -> List[WindowPair]:
    prefix = np.asarray(prefix, dtype=np.float64)
    return [
        WindowPair(prefix[t - L + 1 : t + 1], prefix[t + 1 : t + H + 1], int(t))
        for t in window_ends(prefix.shape[0], L, H)
    ]


class RowAudit:
    """Records every row range a pipeline reads from a series.

    Training code fetches rows through :meth:`read` so a test can check that
    nothing at or beyond the train/test boundary was touched.
    """

    def __init__(self, values: np.ndarray):
        self._values = values
        self.reads: List[Tuple[str, int, int]] = []

    def read(self, lo: int, hi: int, tag: str = "") -> np.ndarray:
        if lo < 0 or hi > self._values.shape[0] or lo > hi:
            raise IndexError(f"row range [{lo}, {hi}) outside [0, {self._values.shape[0]})")
        self.reads.append((tag, int(lo), int(hi)))
        return self._values[lo:hi]

    @property
    def max_row(self) -> int:
        """Largest row index read so far, -1 if none."""
        return max((hi - 1 for _, lo, hi in self.reads if hi > lo), default=-1)

    def reads_at_or_beyond(self, boundary: int) -> List[Tuple[str, int, int]]:
        return [r for r in self.reads if r[2] > boundary]


# ------------------------------------------------------------------ offline statistics


def empirical_bounds(prefix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.float64))
    if prefix.shape[0] == 0:
        raise DataError("empirical_bounds: empty prefix")
    return prefix.min(axis=0), prefix.max(axis=0)


def nearest_rank_quantile(values: np.ndarray, q: float, axis: int = 0) -> np.ndarray:
    """Smallest sample whose empirical CDF reaches ``q`` (no interpolation)."""
    return np.quantile(values, q, axis=axis, method="inverted_cdf")


def robust_kinematics(prefix: np.ndarray, quantile: float = 0.995) -> Tuple[np.ndarray, np.ndarray]:
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim == 1:
        prefix = prefix[:, None]
    if prefix.shape[0] < 3:
        raise DataError(f"robust_kinematics: need at least 3 rows, got {prefix.shape[0]}")
    vel = np.diff(prefix, axis=0)
    acc = np.diff(vel, axis=0)
    return nearest_rank_quantile(np.abs(vel), quantile), nearest_rank_quantile(np.abs(acc), quantile)


def _jitter_constant_columns(X: np.ndarray, seed: int = 0) -> np.ndarray:
    flat = np.ptp(X, axis=0) == 0.0
    if not flat.any():
        return X
    X = X.copy()
    rng = np.random.default_rng(seed)
    X[:, flat] += rng.uniform(-JITTER, JITTER, size=(X.shape[0], int(flat.sum())))
    return X


def estimate_integer_lags(prefix: np.ndarray, tau_max: int) -> np.ndarray:
    """Integer lag per ordered channel pair, maximising lagged Pearson correlation.

    ``lags[i, j] = k > 0`` means channel ``j`` trails channel ``i`` by ``k``
    rows, i.e. ``x_j(t) ~ x_i(t - k)``.  Ties go to the smaller ``|k|``, then
    to the negative lag.  Overlaps with zero variance score 0.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    if tau_max < 0:
        raise DataError("tau_max must be >= 0")
    if prefix.shape[0] < 2 * tau_max + 2:
        raise DataError(f"need at least 2*tau_max+2={2 * tau_max + 2} rows, got {prefix.shape[0]}")
    X = np.ascontiguousarray(_jitter_constant_columns(prefix))
    return kernels.lag_matrix(X, int(tau_max))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "Standardizer":
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))


def zscore(prefix: np.ndarray, floor: float = 1e-8) -> Tuple[np.ndarray, Standardizer]:
    """Per-column standardisation (population std, floored)."""
    prefix = np.asarray(prefix, dtype=np.float64)
    scaler = Standardizer(prefix.mean(axis=0), np.maximum(prefix.std(axis=0), floor))
    return scaler.transform(prefix), scaler


def compute_budgets(prefix: np.ndarray, tau_max: int, quantile: float = 0.995) -> PhysicsBudgets:
    m, M = empirical_bounds(prefix)
    v_max, a_max = robust_kinematics(prefix, quantile)
    return PhysicsBudgets(m, M, v_max, a_max, estimate_integer_lags(prefix, tau_max), int(tau_max))
