"""Federated rounds: FedAvg, update exchange, payload sizing and simulated latency."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientProfile, PreparedClientData, SequenceBatch
from .errors import AggregationError, ConfigError, DataError, RoundError
from .model import ModelParams, TstConfig, param_count, predict, training_flops
from .privacy import PrivacyLedger, PrivacySpec, allocate_budget
from .training import LocalStats, TrainConfig, local_train

# Simulated vehicle throughput and radio link rate at factor 1.0.
DEVICE_FLOPS_PER_MS = 4.5e5
LINK_BYTES_PER_MS = 6250.0  # 50 Mbit/s

PAYLOAD_HEADER_BYTES = 16
_PAYLOAD_MAGIC = b"FLUP"
_FLAG_COMPRESSED = 1

PRIVACY_SCORE_WEIGHTS = (0.7, 0.3)
PRIVACY_SCORE_EPS_REF = 1.0


@dataclass
class ClientState:
    client_id: int
    profile: ClientProfile
    data: PreparedClientData
    seed: int

    def __post_init__(self):
        if not (self.profile.compute_speed > 0 and self.profile.link_rate > 0):
            raise ConfigError(f"client {self.client_id}: speed and link factors must be > 0")


@dataclass
class ClientRoundReport:
    client_id: int
    local_accuracy: float
    mean_loss: float
    clip_fraction: float
    sigma: float
    upload_bytes: int
    download_bytes: int
    compute_ms: float
    comm_ms: float
    stats: LocalStats = field(repr=False, default=None)


@dataclass
class RoundReport:
    round_idx: int
    global_accuracy: float
    mean_local_accuracy: float
    privacy_score: float
    epsilon_round: float
    cumulative_epsilon: float
    clients: list[ClientRoundReport]

    @property
    def accuracy_gap(self) -> float:
        return self.mean_local_accuracy - self.global_accuracy


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def fedavg(updates: Sequence[ModelParams]) -> ModelParams:
    """Unweighted elementwise mean of client parameters.

    Values are sorted across clients before a compensated sum of offsets from
    the smallest, so the result does not depend on client order and identical
    inputs come back bit for bit.
    """
    if not updates:
        raise AggregationError("fedavg needs at least one update")
    ref = updates[0]
    for i, u in enumerate(updates[1:], start=1):
        if not ref.same_layout(u):
            raise AggregationError(f"update {i} layout differs from update 0")
    stacked = np.sort(np.stack([u.flatten() for u in updates]), axis=0)
    base = stacked[0]
    total = np.zeros_like(base)
    comp = np.zeros_like(base)
    for row in stacked[1:] - base:
        t = total + row
        comp += np.where(np.abs(total) >= np.abs(row), (total - t) + row, (row - t) + total)
        total = t
    return ref.unflatten(base + (total + comp) / len(updates))


def model_delta(local: ModelParams, global_ref: ModelParams) -> np.ndarray:
    if not local.same_layout(global_ref):
        raise AggregationError("local and global parameters have different layouts")
    return local.flatten() - global_ref.flatten()


def apply_delta(global_ref: ModelParams, delta: np.ndarray) -> ModelParams:
    return global_ref.unflatten(global_ref.flatten() + delta)


def _header(count: int, flags: int) -> bytes:
    return _PAYLOAD_MAGIC + struct.pack("<HHQ", 1, flags, count)


def encode_payload(vec: np.ndarray) -> bytes:
    """Uncompressed wire form: 16-byte header then little-endian float32."""
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    return _header(vec.size, 0) + vec.astype("<f4").tobytes()


def compress_payload(vec: np.ndarray) -> bytes:
    """Round float32 to its top 24 bits and pack three bytes per value."""
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    bits = vec.astype("<f4").view("<u4").astype(np.uint64)
    finite = np.isfinite(vec)
    rounded = np.where(finite, np.minimum(bits + 0x80, 0xFFFFFFFF), bits) >> 8
    packed = np.empty((vec.size, 3), dtype=np.uint8)
    packed[:, 0] = rounded & 0xFF
    packed[:, 1] = (rounded >> 8) & 0xFF
    packed[:, 2] = (rounded >> 16) & 0xFF
    return _header(vec.size, _FLAG_COMPRESSED) + packed.tobytes()


def decode_payload(blob: bytes) -> np.ndarray:
    if blob[:4] != _PAYLOAD_MAGIC:
        raise ValueError("not an update payload")
    _, flags, count = struct.unpack("<HHQ", blob[4:PAYLOAD_HEADER_BYTES])
    body = blob[PAYLOAD_HEADER_BYTES:]
    if flags & _FLAG_COMPRESSED:
        b = np.frombuffer(body, dtype=np.uint8).reshape(count, 3).astype(np.uint32)
        bits = (b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)) << 8
        return bits.astype("<u4").view("<f4").astype(np.float64)
    return np.frombuffer(body, dtype="<f4").astype(np.float64)


def comm_volume(vec: np.ndarray, direction: str, compress: bool = False) -> int:
    """Bytes on the wire for one update; compression applies to downloads only."""
    if direction not in ("upload", "download"):
        raise ValueError(f"direction must be 'upload' or 'download', got {direction!r}")
    n = int(np.asarray(vec).size)
    if compress and direction == "download":
        return PAYLOAD_HEADER_BYTES + 3 * n
    return PAYLOAD_HEADER_BYTES + 4 * n


def latency_model(client: ClientState, flops_estimate: float, bytes_up: float, bytes_down: float) -> tuple[float, float]:
    """Simulated (compute_ms, comm_ms) for one client round."""
    prof = client.profile
    if not (prof.compute_speed > 0 and prof.link_rate > 0):
        raise ConfigError("speed and link factors must be > 0")
    compute_ms = flops_estimate / (DEVICE_FLOPS_PER_MS * prof.compute_speed)
    comm_ms = (bytes_up + bytes_down) / (LINK_BYTES_PER_MS * prof.link_rate)
    return compute_ms, comm_ms


def _hits(params: ModelParams, data: SequenceBatch, config: TstConfig, tolerance: float) -> tuple[int, int]:
    if len(data) == 0:
        raise DataError("empty evaluation set")
    if not tolerance > 0:
        raise ConfigError("tolerance must be > 0")
    pred = predict(params, data.inputs, config)
    return int((np.abs(pred - data.targets) <= tolerance).sum()), data.targets.size


def accuracy_score(params: ModelParams, eval_data: SequenceBatch, config: TstConfig, tolerance: float = 0.5) -> float:
    """Fraction of (window, target) predictions within ``tolerance`` scaled units."""
    hit, total = _hits(params, eval_data, config, tolerance)
    return hit / total


def pooled_accuracy(params: ModelParams, datasets: Sequence[SequenceBatch], config: TstConfig, tolerance: float = 0.5) -> float:
    hit = total = 0
    for d in datasets:
        h, n = _hits(params, d, config, tolerance)
        hit += h
        total += n
    return hit / total


def privacy_score(cumulative_epsilon: float, clip_fraction: float) -> float:
    """``0.7 * exp(-eps_cum / 1.0) + 0.3 * clip_fraction``, in [0, 1]."""
    w_eps, w_clip = PRIVACY_SCORE_WEIGHTS
    return w_eps * math.exp(-cumulative_epsilon / PRIVACY_SCORE_EPS_REF) + w_clip * clip_fraction


def run_round(
    global_params: ModelParams,
    clients: Sequence[ClientState],
    spec: PrivacySpec,
    round_idx: int,
    ledger: PrivacyLedger,
    model_config: TstConfig,
    train_config: TrainConfig = TrainConfig(),
    epochs: int = 2,
    master_seed: int = 0,
    tolerance: float = 0.5,
) -> tuple[ModelParams, RoundReport]:
    """Broadcast, train locally with DP, aggregate with FedAvg and measure."""
    if not clients:
        raise RoundError(None, "no clients")
    epsilon_round = allocate_budget(spec)
    download_vec = global_params.flatten()
    n_params = param_count(global_params)

    aggregated_inputs, partial = [], []
    for client in clients:
        try:
            rng = derive_rng(master_seed, client.client_id, round_idx)
            local, stats = local_train(
                global_params, client.data.train, epochs, spec, rng, model_config, train_config, epsilon_round
            )
            local_acc = accuracy_score(local, client.data.eval, model_config, tolerance)
            delta = model_delta(local, global_params)
        except RoundError:
            raise
        except Exception as exc:
            raise RoundError(client.client_id, exc) from exc
        # the server's reconstruction global + delta, without a second rounding
        aggregated_inputs.append(local)
        up = comm_volume(delta, "upload")
        down = comm_volume(download_vec, "download", compress=True)
        compute_ms, comm_ms = latency_model(client, training_flops(model_config, n_params, stats.windows), up, down)
        partial.append(
            ClientRoundReport(
                client.client_id, local_acc, stats.mean_loss, stats.clip_fraction, stats.sigma,
                up, down, compute_ms, comm_ms, stats,
            )
        )

    new_global = fedavg(aggregated_inputs)
    ledger.record_spend(epsilon_round)
    global_acc = pooled_accuracy(new_global, [c.data.eval for c in clients], model_config, tolerance)
    clip_frac = float(np.mean([c.clip_fraction for c in partial]))
    report = RoundReport(
        round_idx=round_idx,
        global_accuracy=global_acc,
        mean_local_accuracy=float(np.mean([c.local_accuracy for c in partial])),
        privacy_score=privacy_score(ledger.cumulative, clip_frac),
        epsilon_round=epsilon_round,
        cumulative_epsilon=ledger.cumulative,
        clients=partial,
    )
    return new_global, report
