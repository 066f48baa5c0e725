"""Time-series transformer: feature weighting, dual input projection, pre-norm encoder."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import AggregationError, ConfigError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-5
FEATURE_WEIGHT_RANGE = (1.5, 2.5)
_MAGIC = b"TSTP"


@dataclass(frozen=True)
class TstConfig:
    n_features: int = 10
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    seq_len: int = 15
    n_outputs: int = 3
    dropout_rate: float = 0.1

    def validate(self) -> None:
        dims = ("n_features", "d_model", "n_heads", "n_layers", "d_ff", "seq_len", "n_outputs")
        bad = [name for name in dims if getattr(self, name) < 1]
        if bad:
            raise ConfigError(f"dimensions must be >= 1: {', '.join(bad)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


# d_model chosen so one float32 update serialises to ~2.1 MB (see payload tests)
PAYLOAD_MATCHED_CONFIG = TstConfig(d_model=176, n_heads=4, n_layers=2, d_ff=352)


class ModelParams(Mapping):
    """Named parameter tensors, always iterated in sorted-name order."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name in sorted(tensors or {}):
            t = tensors[name]
            self._tensors[name] = t if isinstance(t, Tensor) else Tensor(t)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._tensors.items()}

    def clone(self) -> ModelParams:
        return ModelParams({k: Tensor(t.data.copy()) for k, t in self._tensors.items()})

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def flat_grad(self) -> np.ndarray:
        parts = [np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1) for t in self._tensors.values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, flat: np.ndarray) -> ModelParams:
        """New params with this layout and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != param_count(self):
            raise AggregationError(f"flat vector has {flat.size} values, layout needs {param_count(self)}")
        out, offset = {}, 0
        for name, t in self._tensors.items():
            n = t.data.size
            out[name] = Tensor(flat[offset : offset + n].reshape(t.shape).copy())
            offset += n
        return ModelParams(out)

    def requires_grad_(self, flag: bool = True) -> ModelParams:
        for t in self._tensors.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def same_layout(self, other: ModelParams) -> bool:
        return self.shapes() == other.shapes()


def param_count(params: ModelParams) -> int:
    return int(sum(t.data.size for t in params.values()))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config: TstConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit norm gains, feature weights in [1.5, 2.5].

    Attention has no key bias: it shifts every score of a query equally and so
    never changes the softmax.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    F, d, ff = config.n_features, config.d_model, config.d_ff
    p: dict[str, np.ndarray] = {
        "feature_weights": rng.uniform(*FEATURE_WEIGHT_RANGE, size=F),
        "input.w1": _glorot(rng, F, d),
        "input.b1": np.zeros(d),
        "input.w2": _glorot(rng, d, d),
        "input.b2": np.zeros(d),
    }
    for i in range(config.n_layers):
        pre = f"layer{i}."
        p[pre + "ln1.gain"] = np.ones(d)
        p[pre + "ln1.bias"] = np.zeros(d)
        for m in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + m] = _glorot(rng, d, d)
        for b in ("bq", "bv", "bo"):
            p[pre + "attn." + b] = np.zeros(d)
        p[pre + "ln2.gain"] = np.ones(d)
        p[pre + "ln2.bias"] = np.zeros(d)
        p[pre + "ff.w1"] = _glorot(rng, d, ff)
        p[pre + "ff.b1"] = np.zeros(ff)
        p[pre + "ff.w2"] = _glorot(rng, ff, d)
        p[pre + "ff.b2"] = np.zeros(d)
    p["final_ln.gain"] = np.ones(d)
    p["final_ln.bias"] = np.zeros(d)
    p["output.w"] = _glorot(rng, d, config.n_outputs)
    p["output.b"] = np.zeros(config.n_outputs)
    return ModelParams({k: Tensor(v) for k, v in p.items()})


def expected_param_count(config: TstConfig) -> int:
    F, d, ff, L, o = config.n_features, config.d_model, config.d_ff, config.n_layers, config.n_outputs
    per_layer = 2 * d + 4 * d * d + 3 * d + 2 * d + (d * ff + ff) + (ff * d + d)
    return F + (F * d + d) + (d * d + d) + L * per_layer + 2 * d + (d * o + o)


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def attention_block(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    n_heads: int,
    return_weights: bool = False,
):
    """Pre-norm multihead self-attention with residual: ``x + O(attn(LN(x)))``."""
    B, L, d = x.shape
    if d % n_heads:
        raise DimensionError(f"d_model {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    h = T.layer_norm(x, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"], LN_EPS)

    def split(t: Tensor) -> Tensor:
        return t.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)

    q = split(h @ params[prefix + "attn.wq"] + params[prefix + "attn.bq"])
    k = split(h @ params[prefix + "attn.wk"])
    v = split(h @ params[prefix + "attn.wv"] + params[prefix + "attn.bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax_rows(scores)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    out = x + (ctx @ params[prefix + "attn.wo"] + params[prefix + "attn.bo"])
    return (out, weights) if return_weights else out


def _feedforward_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, rate: float, rng) -> Tensor:
    h = T.layer_norm(x, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"], LN_EPS)
    h = T.gelu(_linear(h, params[prefix + "ff.w1"], params[prefix + "ff.b1"]))
    h = _dropout(h, rate, rng)
    h = _linear(h, params[prefix + "ff.w2"], params[prefix + "ff.b2"])
    return x + _dropout(h, rate, rng)


def forward(
    params: ModelParams,
    inputs,
    config: TstConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Predict the next-step targets for a batch of windows ``[B, seq_len, n_features]``."""
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if x.ndim != 3 or x.shape[2] != config.n_features or x.shape[1] != config.seq_len:
        raise DimensionError(
            f"expected inputs [B, {config.seq_len}, {config.n_features}], got {list(x.shape)}"
        )
    rate = config.dropout_rate if training else 0.0
    n_layers = sum(1 for name in params if name.endswith(".attn.wq"))

    h = x * params["feature_weights"]
    h = T.gelu(_linear(h, params["input.w1"], params["input.b1"]))
    h = _linear(h, params["input.w2"], params["input.b2"])
    h = h + positional_encoding(config.seq_len, config.d_model)
    h = _dropout(h, rate, rng)
    for i in range(n_layers):
        h = attention_block(h, params, f"layer{i}.", config.n_heads)
        h = _feedforward_block(h, params, f"layer{i}.", rate, rng)
    h = T.layer_norm(h, params["final_ln.gain"], params["final_ln.bias"], LN_EPS)
    pooled = h.mean(axis=1)
    return _linear(pooled, params["output.w"], params["output.b"])


def predict(params: ModelParams, inputs: np.ndarray, config: TstConfig, batch_size: int = 256) -> np.ndarray:
    outs = [forward(params, inputs[i : i + batch_size], config).data for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, config.n_outputs))


def training_flops(config: TstConfig, n_params: int, windows: int) -> float:
    """Forward+backward cost of ``windows`` training samples (6 flops per parameter per token)."""
    return 6.0 * n_params * windows * config.seq_len


def serialize_params(params: ModelParams) -> bytes:
    """Header (names and shapes as JSON) followed by little-endian float32 values."""
    header = json.dumps([[name, list(shape)] for name, shape in params.shapes().items()], separators=(",", ":"))
    hb = header.encode("utf-8")
    payload = params.flatten().astype("<f4").tobytes()
    return _MAGIC + struct.pack("<I", len(hb)) + hb + payload


def deserialize_params(blob: bytes) -> ModelParams:
    if blob[:4] != _MAGIC:
        raise ValueError("not a serialized parameter blob")
    (hlen,) = struct.unpack("<I", blob[4:8])
    layout = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    values = np.frombuffer(blob[8 + hlen :], dtype="<f4").astype(np.float64)
    out, offset = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape)) if shape else 1
        out[name] = Tensor(values[offset : offset + n].reshape(shape))
        offset += n
    if offset != values.size:
        raise ValueError("payload length does not match header")
    return ModelParams(out)


def config_dict(config: TstConfig) -> dict:
    return asdict(config)
