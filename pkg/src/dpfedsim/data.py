"""Synthetic vehicle telemetry and the preprocessing that turns it into windows.

Order of preprocessing: log transform, IQR outlier replacement, robust
scaling, then sliding windows with next-step targets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

FEATURES: tuple[str, ...] = (
    "position_x",
    "position_y",
    "acceleration",
    "relative_speed",
    "co2_emission",
    "noise_emission",
    "lane_occupancy",
    "time_loss",
    "lateral_speed",
    "slope",
)
DEFAULT_TARGETS: tuple[str, ...] = ("relative_speed", "acceleration", "co2_emission")
DEFAULT_LOG_FEATURES: tuple[str, ...] = ("co2_emission", "relative_speed")
MIN_TRACE_STEPS = 16


@dataclass(frozen=True)
class ClientProfile:
    """Per-vehicle heterogeneity: driving style, sensor noise and device resources."""

    cruise_speed: float = 13.0  # m/s
    speed_swing: float = 4.0  # amplitude of the target-speed oscillation
    period: float = 60.0  # steps per target-speed cycle
    responsiveness: float = 0.25  # how hard the driver chases the target speed
    accel_memory: float = 0.6  # carry-over of the previous step's acceleration
    co2_gain: float = 900.0  # engine-specific emission response
    accel_noise: float = 0.3
    sensor_noise: float = 0.05
    co2_noise: float = 0.05
    hill_amplitude: float = 2.0  # degrees
    compute_speed: float = 1.0
    link_rate: float = 1.0

    def noiseless(self) -> ClientProfile:
        return replace(self, accel_noise=0.0, sensor_noise=0.0, co2_noise=0.0)


DEFAULT_PROFILES: tuple[ClientProfile, ...] = (
    ClientProfile(cruise_speed=13.0, speed_swing=4.0, period=60.0, compute_speed=1.00, link_rate=1.0),
    ClientProfile(
        cruise_speed=9.0, speed_swing=3.0, period=30.0, responsiveness=0.5, accel_memory=0.2,
        co2_gain=1500.0, compute_speed=0.80, link_rate=0.7,
    ),
    ClientProfile(
        cruise_speed=22.0, speed_swing=6.0, period=120.0, responsiveness=0.08, accel_memory=0.85,
        co2_gain=500.0, compute_speed=1.25, link_rate=1.3,
    ),
    ClientProfile(
        cruise_speed=15.0, speed_swing=6.0, period=45.0, responsiveness=0.35, accel_memory=0.4,
        hill_amplitude=4.0, compute_speed=0.90, link_rate=0.9,
    ),
    ClientProfile(
        cruise_speed=11.0, speed_swing=2.5, period=90.0, responsiveness=0.15, accel_memory=0.75,
        accel_noise=0.4, co2_gain=1200.0, compute_speed=1.10, link_rate=1.1,
    ),
)


@dataclass
class RawTrace:
    """One row per timestep, one column per entry of ``features``."""

    values: np.ndarray  # [n_steps, n_features]
    features: tuple[str, ...] = FEATURES
    dt: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.features):
            raise DataError(f"trace values shape {self.values.shape} does not match {len(self.features)} features")

    def __len__(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.features.index(name)]

    def with_values(self, values: np.ndarray) -> RawTrace:
        return RawTrace(values, self.features, self.dt)

    def slice(self, start: int, stop: int) -> RawTrace:
        return self.with_values(self.values[start:stop].copy())


@dataclass(frozen=True)
class ScalerState:
    median: np.ndarray
    iqr: np.ndarray

    @property
    def divisor(self) -> np.ndarray:
        return np.where(self.iqr > 0, self.iqr, 1.0)

    def transform(self, trace: RawTrace) -> RawTrace:
        return trace.with_values((trace.values - self.median) / self.divisor)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.divisor + self.median


@dataclass
class SequenceBatch:
    inputs: np.ndarray  # [B, seq_len, F]
    targets: np.ndarray  # [B, n_targets]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, index) -> SequenceBatch:
        return SequenceBatch(self.inputs[index], self.targets[index])


def co2_map(speed_times_accel: np.ndarray, gain: float = 900.0) -> np.ndarray:
    """Deterministic CO2 rate (mg/s) as an increasing function of speed times acceleration."""
    return 1200.0 + gain * np.logaddexp(0.0, np.asarray(speed_times_accel) / 4.0)


def generate_trace(seed: int, n_steps: int, profile: ClientProfile | None = None) -> RawTrace:
    """Simulate one vehicle for ``n_steps`` one-second steps.

    Speed integrates acceleration, acceleration chases an oscillating target
    speed (minus a gravity term from the road slope), and emissions are driven
    by speed and acceleration, so the next step is predictable from history.
    """
    if n_steps < MIN_TRACE_STEPS:
        raise ConfigError(f"n_steps must be >= {MIN_TRACE_STEPS}, got {n_steps}")
    p = profile or ClientProfile()
    rng = np.random.default_rng(seed)
    dt = 1.0
    phase = rng.uniform(0, 2 * math.pi)
    hill_phase = rng.uniform(0, 2 * math.pi)
    heading = rng.uniform(0, 2 * math.pi)

    out = np.zeros((n_steps, len(FEATURES)))
    x = y = 0.0
    v = p.cruise_speed
    a = 0.0
    lane = 0.5
    for t in range(n_steps):
        slope = p.hill_amplitude * math.sin(2 * math.pi * t / 240.0 + hill_phase)
        target = p.cruise_speed + p.speed_swing * math.sin(2 * math.pi * t / p.period + phase)
        a = p.accel_memory * a + p.responsiveness * (target - v) - 0.1 * slope + p.accel_noise * rng.standard_normal()
        a = max(-4.0, min(3.0, a))
        v = max(0.0, v + a * dt)
        heading += 0.01 * math.sin(2 * math.pi * t / 150.0)
        x += v * math.cos(heading) * dt
        y += v * math.sin(heading) * dt
        co2 = float(co2_map(v * a, p.co2_gain)) + p.co2_noise * 1200.0 * rng.standard_normal()
        noise_db = 55.0 + 12.0 * math.log10(1.0 + v) + 2.0 * max(a, 0.0)
        noise_db += 20.0 * p.sensor_noise * rng.standard_normal()
        lane = min(1.0, max(0.0, lane + 0.02 * math.sin(2 * math.pi * t / 90.0) + p.sensor_noise * 0.1 * rng.standard_normal()))
        time_loss = dt * max(0.0, 1.0 - v / (p.cruise_speed + p.speed_swing))
        lateral = 0.3 * math.sin(2 * math.pi * t / 20.0) + p.sensor_noise * rng.standard_normal()
        out[t] = (x, y, a, v, max(co2, 0.0), max(noise_db, 0.0), lane, time_loss, lateral, slope)
    return RawTrace(out, FEATURES, dt)


def fit_scaler(trace: RawTrace) -> ScalerState:
    if len(trace) == 0:
        raise DataError("cannot fit a scaler on an empty trace")
    q1, med, q3 = np.percentile(trace.values, [25, 50, 75], axis=0)
    return ScalerState(median=med, iqr=q3 - q1)


@dataclass(frozen=True)
class OutlierBounds:
    low: np.ndarray
    high: np.ndarray
    median: np.ndarray

    def apply(self, trace: RawTrace) -> RawTrace:
        v = trace.values
        return trace.with_values(np.where((v < self.low) | (v > self.high), self.median, v))


def fit_outlier_bounds(trace: RawTrace, k: float = 1.5) -> OutlierBounds:
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    if len(trace) == 0:
        raise DataError("cannot fit outlier bounds on an empty trace")
    q1, med, q3 = np.percentile(trace.values, [25, 50, 75], axis=0)
    spread = q3 - q1
    return OutlierBounds(q1 - k * spread, q3 + k * spread, med)


def replace_outliers_iqr(trace: RawTrace, k: float = 1.5) -> RawTrace:
    """Replace values outside [Q1 - k*IQR, Q3 + k*IQR] with the feature median."""
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    if len(trace) == 0:
        return trace
    return fit_outlier_bounds(trace, k).apply(trace)


def log_transform(trace: RawTrace, features: Sequence[str] = DEFAULT_LOG_FEATURES) -> RawTrace:
    values = trace.values.copy()
    for name in features:
        col = trace.features.index(name)
        if (values[:, col] < 0).any():
            raise DataError(f"log transform needs non-negative {name}")
        values[:, col] = np.log1p(values[:, col])
    return trace.with_values(values)


def make_sequences(
    trace: RawTrace,
    seq_len: int = 15,
    stride: int = 1,
    target_features: Sequence[str] = DEFAULT_TARGETS,
) -> SequenceBatch:
    """Overlapping windows of ``seq_len`` steps; each target is the step right after its window."""
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    if not 1 <= stride < seq_len:
        raise ConfigError(f"stride must satisfy 1 <= stride < seq_len, got {stride}")
    n = len(trace)
    if n < seq_len + 1:
        raise DataError(f"trace has {n} steps, need at least {seq_len + 1}")
    cols = [trace.features.index(name) for name in target_features]
    count = (n - seq_len - 1) // stride + 1
    starts = np.arange(count) * stride
    idx = starts[:, None] + np.arange(seq_len)[None, :]
    inputs = trace.values[idx]
    targets = trace.values[starts + seq_len][:, cols]
    return SequenceBatch(inputs, targets)


def window_count(n_steps: int, seq_len: int, stride: int) -> int:
    return (n_steps - seq_len - 1) // stride + 1


def iter_batches(data: SequenceBatch, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[SequenceBatch]:
    """Split into contiguous chunks of consecutive windows; ``rng`` shuffles chunk order only."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    starts = np.arange(0, len(data), batch_size)
    if rng is not None:
        starts = rng.permutation(starts)
    for s in starts:
        yield data[int(s) : int(s) + batch_size]


@dataclass
class PreparedClientData:
    scaler: ScalerState
    train: SequenceBatch
    eval: SequenceBatch


def prepare_client_data(
    trace: RawTrace,
    seq_len: int = 15,
    stride: int = 1,
    target_features: Sequence[str] = DEFAULT_TARGETS,
    eval_fraction: float = 0.2,
    outlier_k: float = 1.5,
    log_features: Sequence[str] = DEFAULT_LOG_FEATURES,
) -> PreparedClientData:
    """Run the full preprocessing chain; statistics come from the training span only."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError("eval_fraction must lie in (0, 1)")
    trace = log_transform(trace, log_features)
    split = int(round(len(trace) * (1.0 - eval_fraction)))
    train_raw, eval_raw = trace.slice(0, split), trace.slice(split, len(trace))
    if len(eval_raw) < seq_len + 1 or len(train_raw) < seq_len + 1:
        raise DataError("trace too short for the requested train/eval split")
    bounds = fit_outlier_bounds(train_raw, outlier_k)
    train_raw, eval_raw = bounds.apply(train_raw), bounds.apply(eval_raw)
    scaler = fit_scaler(train_raw)
    train = make_sequences(scaler.transform(train_raw), seq_len, stride, target_features)
    evaluation = make_sequences(scaler.transform(eval_raw), seq_len, stride, target_features)
    return PreparedClientData(scaler, train, evaluation)


def write_trace_csv(trace: RawTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trace.features)
        for row in trace.values:
            writer.writerow([repr(float(v)) for v in row])


def read_trace_csv(path: str | Path) -> RawTrace:
    """Load a trace written by :func:`write_trace_csv` or an external export with the same header.

    Extra columns are dropped; every column in ``FEATURES`` must be present.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [name for name in FEATURES if name not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        cols = [header.index(name) for name in FEATURES]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in cols])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return RawTrace(np.array(rows), FEATURES)
