"""Tiny decoder-only transformer with switchable per-layer weight precision.

Every linear layer keeps its fp reference weights plus INT8 and INT4
encodings side by side; the active rung is a pointer that can be moved at
any time between forward calls. Weights are dequantized on every use so
the bytes-touched counter follows the active rung.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from time import perf_counter_ns
from typing import Iterable

import numpy as np

from .errors import CapacityError, ConfigurationError, DimensionError, InputError, StateError
from .quantizer import ASYMMETRIC, MODES, QuantizedTensor, dequantize, quantize
from .tensor_core import STORAGE_DTYPE, as_tensor, gelu, layer_norm, matmul, softmax

FP_BITS = 16  # fp rung; stored as float32 but accounted as FP16
RUNGS = (FP_BITS, 8, 4)
RUNG_BUCKETS = {FP_BITS: "fp", 8: "int8", 4: "int4"}
LINEAR_NAMES = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    ffn_dim: int = 512
    max_seq_len: int = 1024
    tie_head: bool = True
    quant_mode: str = ASYMMETRIC

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must equal n_heads * head_dim")
        if self.quant_mode not in MODES:
            raise ConfigurationError(f"unknown quant_mode {self.quant_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SwitchEvent:
    layer_id: str
    from_bits: int
    to_bits: int


class TrafficAccountant:
    """Running count of weight bytes read by linear layers."""

    def __init__(self):
        self.bytes_touched = 0

    def add(self, nbytes: int) -> None:
        self.bytes_touched += nbytes


class LatencyProfiler:
    """Attributes consecutive wall-clock segments to named buckets."""

    def __init__(self):
        self.buckets: dict[str, int] = {}
        self._mark = perf_counter_ns()

    def reset(self) -> None:
        self.buckets = {}
        self._mark = perf_counter_ns()

    def lap(self, bucket: str) -> None:
        now = perf_counter_ns()
        self.buckets[bucket] = self.buckets.get(bucket, 0) + now - self._mark
        self._mark = now


class MultiPrecisionLayer:
    def __init__(self, layer_id: str, weight, bias=None, quant_mode: str = ASYMMETRIC,
                 quantized: dict[int, QuantizedTensor] | None = None, current: int = FP_BITS):
        weight = np.asarray(weight, dtype=STORAGE_DTYPE)
        if weight.ndim != 2:
            raise DimensionError(f"{layer_id}: weight must be 2-D")
        self.layer_id = layer_id
        self.bias = np.zeros(weight.shape[0], STORAGE_DTYPE) if bias is None else np.asarray(bias, STORAGE_DTYPE)
        if quantized is None:
            quantized = {b: quantize(weight, b, quant_mode) for b in (8, 4)}
        for b, q in quantized.items():
            if q.shape != weight.shape:
                raise DimensionError(f"{layer_id}: {b}-bit payload shape {q.shape} != {weight.shape}")
        self.available: dict[int, np.ndarray | QuantizedTensor] = {FP_BITS: weight, **quantized}
        if current not in self.available:
            raise StateError(f"{layer_id}: rung {current} not available")
        self.current = current

    @property
    def shape(self) -> tuple[int, int]:
        return self.available[FP_BITS].shape

    @property
    def param_count(self) -> int:
        rows, cols = self.shape
        return rows * cols

    def bytes_at(self, bits: int) -> int:
        return self.param_count * bits // 8

    def active_weight(self) -> np.ndarray:
        if self.current not in self.available:
            raise StateError(f"{self.layer_id}: active rung {self.current} missing")
        payload = self.available[self.current]
        if self.current == FP_BITS:
            return as_tensor(payload)
        return dequantize(payload)


def linear_forward(x, layer: MultiPrecisionLayer, traffic: TrafficAccountant | None = None) -> np.ndarray:
    """``x @ W^T + b`` against the layer's active rung."""
    x = as_tensor(x)
    w = layer.active_weight()
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"{layer.layer_id}: input width {x.shape[-1]} != {w.shape[1]}")
    y = matmul(x, w.T) + layer.bias
    if traffic is not None:
        traffic.add(layer.bytes_at(layer.current))
    return y


def attention(q, k, v, causal_offset: int = 0) -> np.ndarray:
    """Single-head causal attention.

    Query row ``i`` sits at absolute position ``causal_offset + i`` and may
    attend to key rows ``0 .. causal_offset + i``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[0] == 0:
        raise StateError("attention over an empty key set")
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    scores = matmul(q, k.T) / math.sqrt(q.shape[1])
    visible = np.arange(k.shape[0])[None, :] <= (causal_offset + np.arange(q.shape[0]))[:, None]
    scores = np.where(visible, scores, -np.inf)
    return matmul(softmax(scores), v)


def effective_bits(layers: Iterable[MultiPrecisionLayer]) -> float:
    """Parameter-weighted mean active bit-width (fp counted as 16)."""
    layers = list(layers)
    total = sum(l.param_count for l in layers)
    if total == 0:
        return 0.0
    return sum(l.param_count * l.current for l in layers) / total


@dataclass
class KvCache:
    keys: list[np.ndarray]  # per block: [max_seq_len, n_heads, head_dim]
    values: list[np.ndarray]
    length: int = 0

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "KvCache":
        shape = (cfg.max_seq_len, cfg.n_heads, cfg.head_dim)
        return cls([np.zeros(shape) for _ in range(cfg.n_layers)], [np.zeros(shape) for _ in range(cfg.n_layers)])

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0


@dataclass
class Block:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


class TinyTransformer:
    def __init__(self, config: ModelConfig, tok_emb, pos_emb, blocks: list[Block],
                 linears: dict[str, MultiPrecisionLayer], ln_f_g, ln_f_b, head=None):
        self.config = config
        self.tok_emb = np.asarray(tok_emb, STORAGE_DTYPE)
        self.pos_emb = np.asarray(pos_emb, STORAGE_DTYPE)
        self.blocks = blocks
        self.linears = linears
        self.ln_f_g = np.asarray(ln_f_g, STORAGE_DTYPE)
        self.ln_f_b = np.asarray(ln_f_b, STORAGE_DTYPE)
        self.head = None if head is None else np.asarray(head, STORAGE_DTYPE)
        if not config.tie_head and self.head is None:
            raise ConfigurationError("untied head requested but no head weights given")
        expected = {f"blocks.{i}.{n}" for i in range(config.n_layers) for n in LINEAR_NAMES}
        if set(linears) != expected:
            raise ConfigurationError("linear layer set does not match the config")
        self.traffic = TrafficAccountant()
        self.profiler = LatencyProfiler()
        self.switch_events: list[SwitchEvent] = []

    # -- precision management -------------------------------------------

    def layer_ids(self) -> list[str]:
        return list(self.linears)

    def set_precision(self, layer_id: str, bits: int) -> SwitchEvent | None:
        layer = self.linears.get(layer_id)
        if layer is None:
            raise StateError(f"unknown layer {layer_id!r}")
        if bits not in layer.available:
            raise StateError(f"{layer_id}: rung {bits} not available")
        if bits == layer.current:
            return None
        event = SwitchEvent(layer_id, layer.current, bits)
        layer.current = bits
        self.switch_events.append(event)
        return event

    def set_all_precision(self, bits: int) -> None:
        for layer_id in self.linears:
            self.set_precision(layer_id, bits)

    def precision_map(self) -> dict[str, int]:
        return {k: l.current for k, l in self.linears.items()}

    def effective_bits(self) -> float:
        return effective_bits(self.linears.values())

    def weight_bytes_per_token(self) -> int:
        return sum(l.bytes_at(l.current) for l in self.linears.values())

    # -- forward ----------------------------------------------------------

    def _linear(self, x, layer_id: str) -> np.ndarray:
        prof = self.profiler
        prof.lap("other")
        layer = self.linears[layer_id]
        y = linear_forward(x, layer, self.traffic)
        prof.lap(RUNG_BUCKETS[layer.current])
        return y

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise InputError(f"token id outside [0, {self.config.vocab_size})")
        return tokens

    def _forward(self, tokens: np.ndarray, cache: KvCache) -> np.ndarray:
        cfg = self.config
        start, n = cache.length, len(tokens)
        if start + n > cache.capacity:
            raise CapacityError(f"cache holds {start} of {cache.capacity}; cannot add {n}")
        prof = self.profiler
        prof.lap("other")
        x = as_tensor(self.tok_emb[tokens]) + self.pos_emb[start:start + n]
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}."
            h = layer_norm(x, blk.ln1_g, blk.ln1_b)
            q = self._linear(h, p + "attn.q").reshape(n, cfg.n_heads, cfg.head_dim)
            k = self._linear(h, p + "attn.k").reshape(n, cfg.n_heads, cfg.head_dim)
            v = self._linear(h, p + "attn.v").reshape(n, cfg.n_heads, cfg.head_dim)
            prof.lap("other")
            cache.keys[i][start:start + n] = k
            cache.values[i][start:start + n] = v
            keys = cache.keys[i][:start + n]
            vals = cache.values[i][:start + n]
            heads = [attention(q[:, hd], keys[:, hd], vals[:, hd], causal_offset=start) for hd in range(cfg.n_heads)]
            a = np.concatenate(heads, axis=-1)
            prof.lap("attention")
            x = x + self._linear(a, p + "attn.o")
            h = layer_norm(x, blk.ln2_g, blk.ln2_b)
            u = gelu(self._linear(h, p + "mlp.up"))
            x = x + self._linear(u, p + "mlp.down")
        cache.length = start + n
        h = layer_norm(x, self.ln_f_g, self.ln_f_b)
        head = self.tok_emb if self.config.tie_head else self.head
        logits = matmul(h, head.T)
        prof.lap("other")
        return logits

    def forward_prefill(self, tokens) -> tuple[np.ndarray, KvCache]:
        tokens = self._check_tokens(tokens)
        if tokens.size == 0:
            raise InputError("empty prompt")
        if tokens.size > self.config.max_seq_len:
            raise CapacityError(f"prompt of {tokens.size} tokens exceeds max_seq_len {self.config.max_seq_len}")
        cache = KvCache.empty(self.config)
        return self._forward(tokens, cache), cache

    def forward_decode(self, token: int, cache: KvCache) -> np.ndarray:
        if cache.length >= cache.capacity:
            raise CapacityError("KV cache is full")
        return self._forward(self._check_tokens([token]), cache)[0]

    def logits(self, tokens) -> np.ndarray:
        """Teacher-forced logits for every position (no persistent cache)."""
        return self.forward_prefill(tokens)[0]

    # -- construction -----------------------------------------------------

    def linear_weights(self) -> dict[str, np.ndarray]:
        return {k: l.available[FP_BITS] for k, l in self.linears.items()}

    @classmethod
    def random(cls, config: ModelConfig = ModelConfig(), seed: int = 0, emb_std: float = 0.1,
               grid_exact: bool = False) -> "TinyTransformer":
        """Seeded pseudo-random fixture.

        With ``grid_exact`` every linear row is snapped onto a 16-level
        power-of-two grid (both extreme levels present), so its INT4 and
        INT8 encodings reproduce the fp weights.
        """
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.ffn_dim
        tok_emb = rng.normal(0, emb_std, (config.vocab_size, d))
        pos_emb = rng.normal(0, 0.1, (config.max_seq_len, d))
        blocks, linears = [], {}
        shapes = {"attn.q": (d, d), "attn.k": (d, d), "attn.v": (d, d), "attn.o": (d, d),
                  "mlp.up": (f, d), "mlp.down": (d, f)}
        for i in range(config.n_layers):
            blocks.append(Block(np.ones(d), np.zeros(d), np.ones(d), np.zeros(d)))
            for name in LINEAR_NAMES:
                rows, cols = shapes[name]
                w = rng.normal(0, 1 / math.sqrt(cols), (rows, cols))
                if grid_exact:
                    w = _snap_to_grid(w, rng)
                b = rng.normal(0, 0.02, rows)
                lid = f"blocks.{i}.{name}"
                linears[lid] = MultiPrecisionLayer(lid, w, b, config.quant_mode)
        head = None if config.tie_head else rng.normal(0, emb_std, (config.vocab_size, d))
        return cls(config, tok_emb, pos_emb, blocks, linears, np.ones(d), np.zeros(d), head)

    @classmethod
    def zeros(cls, config: ModelConfig = ModelConfig()) -> "TinyTransformer":
        """All-zero weights: every position predicts the uniform distribution."""
        d, f = config.d_model, config.ffn_dim
        shapes = {"attn.q": (d, d), "attn.k": (d, d), "attn.v": (d, d), "attn.o": (d, d),
                  "mlp.up": (f, d), "mlp.down": (d, f)}
        linears = {
            f"blocks.{i}.{n}": MultiPrecisionLayer(f"blocks.{i}.{n}", np.zeros(shapes[n]), None, config.quant_mode)
            for i in range(config.n_layers) for n in LINEAR_NAMES
        }
        blocks = [Block(np.ones(d), np.zeros(d), np.ones(d), np.zeros(d)) for _ in range(config.n_layers)]
        head = None if config.tie_head else np.zeros((config.vocab_size, d))
        return cls(config, np.zeros((config.vocab_size, d)), np.zeros((config.max_seq_len, d)),
                   blocks, linears, np.ones(d), np.zeros(d), head)


def _snap_to_grid(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    step = 2.0 ** -5
    levels = np.clip(np.rint(w / step) + 8, 0, 15)
    for row in levels:
        lo, hi = rng.choice(row.size, 2, replace=False)
        row[lo], row[hi] = 0, 15
    return (levels - 8) * step
