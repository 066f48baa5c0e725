"""Experiment configuration, full federated runs, epsilon sweeps and CSV/JSON output."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DEFAULT_PROFILES, DEFAULT_TARGETS, generate_trace, prepare_client_data
from .errors import ConfigError
from .federation import ClientState, RoundReport, run_round
from .model import ModelParams, TstConfig, init_params
from .privacy import PrivacyLedger, PrivacySpec
from .training import HybridLossConfig, TrainConfig

# seed-stream tags
_DATA = 1
_INIT = 2


@dataclass(frozen=True)
class ExperimentConfig:
    """Every tunable of one federated run, flat so it maps 1:1 onto config-file keys."""

    clients: int = 5
    rounds: int = 10
    local_epochs: int = 2
    batch_size: int = 32
    seq_len: int = 15
    stride: int = 1
    trace_steps: int = 500
    eval_fraction: float = 0.2
    outlier_k: float = 1.5
    seed: int = 0
    output_dir: str = "results"
    # privacy
    epsilon_total: float = 0.8
    delta: float = 1e-5
    clip_norm: float = 1.5
    budget_mode: str = "sqrt"
    sensitivity_divisor: float = 1.0
    # model
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.1
    # optimisation and loss
    lr: float = 5e-4
    weight_decay: float = 0.01
    alpha: float = 0.5
    huber_weight: float = 0.2
    huber_delta: float = 1.0
    w_smooth: float = 0.05
    w_direction: float = 0.05
    w_temporal: float = 0.1
    # evaluation
    tolerance: float = 0.5

    @property
    def privacy(self) -> PrivacySpec:
        return PrivacySpec(
            self.epsilon_total, self.delta, self.clip_norm, self.rounds, self.budget_mode, self.sensitivity_divisor
        )

    @property
    def model(self) -> TstConfig:
        return TstConfig(
            n_features=10, d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
            d_ff=self.d_ff, seq_len=self.seq_len, n_outputs=len(DEFAULT_TARGETS), dropout_rate=self.dropout_rate,
        )

    @property
    def loss(self) -> HybridLossConfig:
        return HybridLossConfig(
            self.alpha, self.huber_weight, self.huber_delta, self.w_smooth, self.w_direction, self.w_temporal
        )

    @property
    def training(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay, loss=self.loss)

    def errors(self) -> list[str]:
        errs = []
        for name in ("clients", "rounds", "local_epochs", "batch_size", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.batch_size > 32:
            errs.append("batch_size must be <= 32")
        if self.seq_len < 2:
            errs.append("seq_len must be >= 2")
        if not 1 <= self.stride < max(self.seq_len, 2):
            errs.append("stride must satisfy 1 <= stride < seq_len")
        if not 0 < self.eval_fraction < 1:
            errs.append("eval_fraction must lie in (0, 1)")
        if self.trace_steps * min(self.eval_fraction, 1 - self.eval_fraction) < self.seq_len + 1:
            errs.append("trace_steps too small for seq_len and eval_fraction")
        if not self.outlier_k > 0:
            errs.append("outlier_k must be > 0")
        if not self.tolerance > 0:
            errs.append("tolerance must be > 0")
        if not self.lr > 0:
            errs.append("lr must be > 0")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if self.d_model >= 1 and self.n_heads >= 1 and self.d_model % self.n_heads:
            errs.append("d_model must be divisible by n_heads")
        if not 0 <= self.dropout_rate < 1:
            errs.append("dropout_rate must lie in [0, 1)")
        if math.isinf(self.clip_norm) and math.isfinite(self.epsilon_total):
            errs.append("clip_norm may only be inf when epsilon_total is inf")
        errs += self.privacy.errors() if self.rounds >= 1 else []
        errs += self.loss.errors()
        return errs

    def validate(self) -> ExperimentConfig:
        errs = self.errors()
        if errs:
            raise ConfigError("invalid config: " + "; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


CONFIG_KEYS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, raw, where: str):
    default = CONFIG_KEYS[name].default
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            return {"true": True, "false": False}[str(raw).strip().lower()]
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (ValueError, KeyError, TypeError):
        raise ConfigError(f"{where}: cannot parse {name}={raw!r} as {type(default).__name__}") from None


def validate_config(raw: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse flat ``key = value`` text (``#`` comments) or a JSON object into a validated config."""
    values: dict = {}
    text = raw.strip()
    if text.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ConfigError("JSON config must be an object")
        for key, value in obj.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, value, f"key {key}")
    else:
        for lineno, line in enumerate(raw.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _coerce(key, value, f"line {lineno}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value, f"override {key}")
    return ExperimentConfig(**values).validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return validate_config(text, overrides)


def build_clients(config: ExperimentConfig) -> list[ClientState]:
    clients = []
    for cid in range(config.clients):
        profile = DEFAULT_PROFILES[cid % len(DEFAULT_PROFILES)]
        data_seed = int(np.random.SeedSequence([config.seed, _DATA, cid]).generate_state(1)[0])
        trace = generate_trace(data_seed, config.trace_steps, profile)
        prepared = prepare_client_data(
            trace, config.seq_len, config.stride, DEFAULT_TARGETS, config.eval_fraction, config.outlier_k
        )
        clients.append(ClientState(cid, profile, prepared, data_seed))
    return clients


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    ledger: PrivacyLedger
    final_params: ModelParams = field(repr=False)

    @property
    def final_accuracy(self) -> float:
        return self.reports[-1].global_accuracy


def run_experiment(config: ExperimentConfig, clients: Sequence[ClientState] | None = None) -> ExperimentResult:
    """Run ``config.rounds`` federated rounds from a seeded initial model."""
    config.validate()
    clients = list(clients) if clients is not None else build_clients(config)
    init_seed = int(np.random.SeedSequence([config.seed, _INIT]).generate_state(1)[0])
    params = init_params(config.model, init_seed)
    ledger = PrivacyLedger()
    reports = []
    for r in range(1, config.rounds + 1):
        params, report = run_round(
            params, clients, config.privacy, r, ledger, config.model, config.training,
            config.local_epochs, config.seed, config.tolerance,
        )
        reports.append(report)
    return ExperimentResult(config, reports, ledger, params)


def sweep_epsilon(base: ExperimentConfig, values: Iterable[float]) -> list[dict]:
    """One run per epsilon in fixed-budget mode; data, init and noise seeds are shared across points."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one epsilon")
    bad = [v for v in values if not v > 0]
    if bad:
        raise ConfigError(f"epsilon values must be > 0, got {bad}")
    base = base.validate()
    clients = build_clients(base)
    rows = []
    for eps in values:
        cfg = replace(base, epsilon_total=float(eps), budget_mode="fixed").validate()
        result = run_experiment(cfg, clients)
        last = result.reports[-1]
        rows.append({
            "epsilon": float(eps),
            "final_global_accuracy": last.global_accuracy,
            "final_local_accuracy": last.mean_local_accuracy,
            "privacy_score": last.privacy_score,
            "sigma": last.clients[0].sigma,
        })
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


METRICS_HEADER = (
    "round", "scope", "client", "global_accuracy", "local_accuracy", "privacy_score", "epsilon_round",
    "cumulative_epsilon", "sigma", "clip_fraction", "mean_loss", "upload_bytes", "download_bytes",
    "compute_ms", "comm_ms",
)


def metrics_rows(reports: Sequence[RoundReport]) -> list[tuple]:
    rows = []
    for rep in reports:
        rows.append((
            rep.round_idx, "round", "", rep.global_accuracy, rep.mean_local_accuracy, rep.privacy_score,
            rep.epsilon_round, rep.cumulative_epsilon,
            float(np.mean([c.sigma for c in rep.clients])),
            float(np.mean([c.clip_fraction for c in rep.clients])),
            float(np.mean([c.mean_loss for c in rep.clients])),
            sum(c.upload_bytes for c in rep.clients), sum(c.download_bytes for c in rep.clients),
            max(c.compute_ms for c in rep.clients), max(c.comm_ms for c in rep.clients),
        ))
        for c in rep.clients:
            rows.append((
                rep.round_idx, "client", c.client_id, "", c.local_accuracy, "", rep.epsilon_round,
                rep.cumulative_epsilon, c.sigma, c.clip_fraction, c.mean_loss, c.upload_bytes,
                c.download_bytes, c.compute_ms, c.comm_ms,
            ))
    return rows


def _config_echo(config: ExperimentConfig) -> dict:
    # where the files land is not part of the experiment; leaving it out keeps reruns byte-identical
    echo = config.to_dict()
    del echo["output_dir"]
    return echo


def write_run_artifacts(result: ExperimentResult, out_dir: str | Path) -> Path:
    """metrics.csv, summary.json and one CSV per figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reps = result.reports
    _write_csv(out / "metrics.csv", METRICS_HEADER, metrics_rows(reps))
    _write_csv(
        out / "accuracy_vs_round.csv",
        ("round", "global_accuracy", "local_accuracy", "accuracy_gap"),
        ((r.round_idx, r.global_accuracy, r.mean_local_accuracy, r.accuracy_gap) for r in reps),
    )
    _write_csv(
        out / "bytes_vs_round.csv",
        ("round", "mean_upload_bytes", "mean_download_bytes"),
        (
            (r.round_idx, float(np.mean([c.upload_bytes for c in r.clients])),
             float(np.mean([c.download_bytes for c in r.clients])))
            for r in reps
        ),
    )
    _write_csv(
        out / "latency_per_client.csv",
        ("round", "client", "compute_ms", "comm_ms", "comm_share"),
        (
            (r.round_idx, c.client_id, c.compute_ms, c.comm_ms, c.comm_ms / (c.comm_ms + c.compute_ms))
            for r in reps for c in r.clients
        ),
    )
    _write_csv(
        out / "local_stats.csv",
        ("client", "round", "epoch", "mean_loss", "clip_fraction", "batches"),
        (
            (c.client_id, r.round_idx, e.epoch, e.mean_loss, e.clip_fraction, e.batches)
            for r in reps for c in r.clients for e in c.stats.epochs
        ),
    )
    summary = {
        "config": _config_echo(result.config),
        "accuracy_curve": [r.global_accuracy for r in reps],
        "local_accuracy_curve": [r.mean_local_accuracy for r in reps],
        "privacy_ledger": {"spends": result.ledger.spends, "cumulative": result.ledger.cumulative},
        "final_global_accuracy": result.final_accuracy,
        "final_privacy_score": reps[-1].privacy_score,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


SWEEP_HEADER = ("epsilon", "final_global_accuracy", "final_local_accuracy", "privacy_score", "sigma")


def write_sweep_artifacts(rows: Sequence[dict], base: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "accuracy_vs_epsilon.csv", SWEEP_HEADER, ([row[k] for k in SWEEP_HEADER] for row in rows))
    summary = {"config": _config_echo(base), "sweep": list(rows)}
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out
