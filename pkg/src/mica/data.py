"""Panel dataset loading, splitting, PCA rotation, and synthetic generators.

A panel is a dense (C, T) float64 matrix: C named channels sampled on a
shared, evenly spaced time grid.  Chronological splits are stored as two
boundary indices on the dataset itself so every consumer slices the same
way: train [0, train_end), validation [train_end, val_end), test
[val_end, T).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Bad run configuration or data that cannot satisfy it."""


@dataclass
class PanelDataset:
    values: np.ndarray            # (C, T)
    channel_ids: list[str]
    frequency: str = "unknown"
    train_end: int | None = None  # split boundaries; set by chrono_split
    val_end: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigError(f"panel values must be (C,T), "
                              f"got shape {self.values.shape}")
        if len(self.channel_ids) != self.values.shape[0]:
            raise ConfigError("channel id count does not match value rows")
        if self.train_end is not None:
            t = self.values.shape[1]
            if not (0 < self.train_end < self.val_end <= t):
                raise ConfigError(
                    f"split bounds 0 < {self.train_end} < {self.val_end} "
                    f"<= {t} violated")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def require_split(self) -> None:
        if self.train_end is None:
            raise ConfigError("dataset has no train/val/test split; "
                              "call chrono_split first")


def chrono_split(panel: PanelDataset, val_size: int,
                 test_size: int) -> PanelDataset:
    """Reserve the last ``test_size`` steps for test and the ``val_size``
    before them for validation."""
    t = panel.n_steps
    if val_size < 1 or test_size < 1:
        raise ConfigError("val_size and test_size must be positive")
    train_end = t - val_size - test_size
    if train_end < 1:
        raise ConfigError(
            f"series of length {t} cannot hold val={val_size} + "
            f"test={test_size} plus a nonempty train span")
    return replace(panel, train_end=train_end, val_end=train_end + val_size)


# -- CSV I/O --------------------------------------------------------------------

def _parse_timestamp(text: str, path, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text).timestamp()
    except ValueError:
        raise ConfigError(
            f"{path}:{line_no}: cannot parse timestamp {text!r}") from None


def _check_time_grid(stamps: list[float], path) -> None:
    ts = np.asarray(stamps)
    if len(ts) > 1:
        deltas = np.diff(ts)
        if np.any(deltas <= 0):
            bad = int(np.argmax(deltas <= 0)) + 2  # +1 header, +1 next row
            raise ConfigError(f"{path}: timestamps not strictly increasing "
                              f"near line {bad}")
        if not np.allclose(deltas, deltas[0], rtol=1e-9, atol=0):
            raise ConfigError(f"{path}: timestamps are not evenly spaced")


def _parse_value(text: str, path, line_no: int) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na"):
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise ConfigError(
            f"{path}:{line_no}: cannot parse value {text!r}") from None


def _fill_or_reject(values: np.ndarray, forward_fill: bool, path) -> np.ndarray:
    mask = np.isnan(values)
    if not mask.any():
        return values
    if not forward_fill:
        c, t = np.argwhere(mask)[0]
        raise ConfigError(f"{path}: missing value for channel index {c} at "
                          f"time index {t} (enable forward_fill to impute)")
    for ci in range(values.shape[0]):
        row = values[ci]
        bad = np.isnan(row)
        if bad[0]:
            raise ConfigError(f"{path}: channel index {ci} starts with a "
                              "missing value; cannot forward-fill")
        idx = np.where(~bad, np.arange(row.size), 0)
        np.maximum.accumulate(idx, out=idx)
        values[ci] = row[idx]
    return values


def load_csv(path, layout: str = "wide", frequency: str = "unknown",
             forward_fill: bool = False) -> PanelDataset:
    """Read a panel from CSV.

    ``wide``: header ``timestamp,<id>,<id>,...``, one row per time step.
    ``long``: header then ``channel_id,timestamp,value`` rows in any order;
    every channel must cover the identical time grid.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise ConfigError(f"{path}: no data rows")
    header, body = rows[0], rows[1:]

    if layout == "wide":
        if len(header) < 2:
            raise ConfigError(f"{path}: wide layout needs a timestamp column "
                              "plus at least one channel")
        channel_ids = [h.strip() for h in header[1:]]
        stamps, data = [], []
        for i, row in enumerate(body):
            line_no = i + 2
            if len(row) != len(header):
                raise ConfigError(f"{path}:{line_no}: expected "
                                  f"{len(header)} fields, got {len(row)}")
            stamps.append(_parse_timestamp(row[0], path, line_no))
            data.append([_parse_value(v, path, line_no) for v in row[1:]])
        _check_time_grid(stamps, path)
        values = np.asarray(data, dtype=np.float64).T
    elif layout == "long":
        if len(header) != 3:
            raise ConfigError(f"{path}: long layout needs exactly "
                              "(channel_id, timestamp, value) columns")
        series: dict[str, dict[float, float]] = {}
        for i, row in enumerate(body):
            line_no = i + 2
            if len(row) != 3:
                raise ConfigError(f"{path}:{line_no}: expected 3 fields, "
                                  f"got {len(row)}")
            cid = row[0].strip()
            ts = _parse_timestamp(row[1], path, line_no)
            val = _parse_value(row[2], path, line_no)
            slot = series.setdefault(cid, {})
            if ts in slot:
                raise ConfigError(f"{path}:{line_no}: duplicate observation "
                                  f"for channel {cid!r}")
            slot[ts] = val
        channel_ids = sorted(series)
        grids = [tuple(sorted(series[cid])) for cid in channel_ids]
        if len(set(grids)) != 1:
            raise ConfigError(f"{path}: channels cover different time grids; "
                              "cannot assemble a dense panel")
        stamps = list(grids[0])
        _check_time_grid(stamps, path)
        values = np.asarray([[series[cid][t] for t in stamps]
                             for cid in channel_ids])
    else:
        raise ConfigError(f"unknown csv layout '{layout}'")

    values = _fill_or_reject(values, forward_fill, path)
    return PanelDataset(values=values, channel_ids=channel_ids,
                        frequency=frequency)


def write_csv(panel: PanelDataset, path) -> None:
    """Write the wide canonical form with an integer time index."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + list(panel.channel_ids))
        for t in range(panel.n_steps):
            writer.writerow([t] + [repr(float(v)) for v in panel.values[:, t]])


# -- PCA across channels -----------------------------------------------------------

@dataclass
class PcaTransform:
    """Orthonormal channel rotation fitted on the training split."""
    components: np.ndarray      # (C, C), rows are components
    means: np.ndarray           # (C,)
    explained_variance: np.ndarray  # (C,), descending


def pca_fit(panel: PanelDataset | np.ndarray,
            rank_tol: float = 1e-12) -> PcaTransform:
    """Eigendecompose the channel covariance of the training slice."""
    if isinstance(panel, PanelDataset):
        end = panel.train_end if panel.train_end is not None else panel.n_steps
        x = panel.values[:, :end]
    else:
        x = np.asarray(panel, dtype=np.float64)
    if x.shape[1] < 2:
        raise ConfigError("pca_fit needs at least two time steps")
    means = x.mean(axis=1)
    centered = x - means[:, None]
    cov = centered @ centered.T / x.shape[1]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    components = eigvecs[:, order].T
    if eigvals[0] > 0 and eigvals[-1] < rank_tol * eigvals[0]:
        warnings.warn("channel covariance is rank deficient; some PCA "
                      "components carry (numerically) zero variance")
    return PcaTransform(components=components, means=means,
                        explained_variance=np.maximum(eigvals, 0.0))


def pca_apply(transform: PcaTransform, values: np.ndarray) -> np.ndarray:
    return transform.components @ (values - transform.means[:, None])


def pca_invert(transform: PcaTransform, rotated: np.ndarray) -> np.ndarray:
    return transform.components.T @ rotated + transform.means[:, None]


# -- synthetic panels ----------------------------------------------------------------

def _ar1(innovations: np.ndarray, coeff: float) -> np.ndarray:
    out = np.empty_like(innovations)
    acc = 0.0
    for t, e in enumerate(innovations):
        acc = coeff * acc + e
        out[t] = acc
    return out


def gen_leadlag(n_channels: int, n_steps: int, lag: int, noise_sigma: float,
                seed: int, ar_coeff: float = 0.9, season_period: int = 24,
                season_amp: float = 1.0) -> PanelDataset:
    """Channel 0 drives; channel c repeats it delayed by c*lag plus noise.

    The driver is AR(1) plus a sinusoidal seasonal term, so followers are
    predictable from other channels' history but not from their own alone
    once the delay exceeds the input window.
    """
    if n_channels < 2:
        raise ConfigError("lead-lag panel needs at least 2 channels")
    if lag < 1 or n_steps < 1:
        raise ConfigError("lag and n_steps must be positive")
    rng = np.random.default_rng(seed)
    burn = 100
    total = n_steps + (n_channels - 1) * lag + burn
    driver = _ar1(rng.normal(0.0, 1.0, size=total), ar_coeff)
    driver += season_amp * np.sin(2 * np.pi * np.arange(total) / season_period)
    offset = burn + (n_channels - 1) * lag
    values = np.empty((n_channels, n_steps))
    values[0] = driver[offset:offset + n_steps]
    for c in range(1, n_channels):
        start = offset - c * lag
        values[c] = driver[start:start + n_steps]
        if noise_sigma > 0:
            values[c] += rng.normal(0.0, noise_sigma, size=n_steps)
    ids = [f"ch{c}" for c in range(n_channels)]
    return PanelDataset(values=values, channel_ids=ids, frequency="synthetic")


def gen_independent(n_channels: int, n_steps: int, seed: int,
                    ar_coeff: float = 0.8) -> PanelDataset:
    """Independent AR(1) channels; nothing cross-channel to exploit."""
    if n_channels < 1 or n_steps < 1:
        raise ConfigError("n_channels and n_steps must be positive")
    rng = np.random.default_rng(seed)
    burn = 100
    values = np.empty((n_channels, n_steps))
    for c in range(n_channels):
        series = _ar1(rng.normal(0.0, 1.0, size=n_steps + burn), ar_coeff)
        values[c] = series[burn:]
    ids = [f"ch{c}" for c in range(n_channels)]
    return PanelDataset(values=values, channel_ids=ids, frequency="synthetic")
