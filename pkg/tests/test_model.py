import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexquant.errors import CapacityError, InputError, StateError
from flexquant.model import (
    FP_BITS,
    KvCache,
    ModelConfig,
    MultiPrecisionLayer,
    TinyTransformer,
    TrafficAccountant,
    attention,
    effective_bits,
    linear_forward,
)

from conftest import SMALL


def naive_attention(q, k, v, offset):
    n_q, d = q.shape
    out = np.zeros_like(q, dtype=float)
    for i in range(n_q):
        visible = range(min(offset + i + 1, k.shape[0]))
        scores = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) for j in visible]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        for t in range(d):
            out[i, t] = sum(w[j] / z * v[j, t] for j in visible)
    return out


def scalar_dequantize(q):
    codes = q.stored_codes()
    out = np.zeros(q.shape)
    for r in range(q.rows):
        for c in range(q.cols):
            out[r, c] = (int(codes[r, c]) - int(q.zero_point[r])) * float(q.scale[r])
    return out


# -- linear ------------------------------------------------------------------

def test_linear_fp_is_plain_matmul(rng):
    w = rng.normal(size=(6, 5)).astype(np.float32)
    b = rng.normal(size=6).astype(np.float32)
    layer = MultiPrecisionLayer("l", w, b)
    x = rng.normal(size=(3, 5))
    assert np.array_equal(linear_forward(x, layer), x @ w.astype(np.float64).T + b.astype(np.float64))


def test_linear_int8_on_grid_matches_fp(rng):
    levels = rng.integers(0, 256, size=(4, 10))
    levels[:, 0], levels[:, 1] = 0, 255
    w = (levels - 128) * 2.0**-7
    layer = MultiPrecisionLayer("l", w)
    x = rng.normal(size=(2, 10))
    ref = linear_forward(x, layer)
    layer.current = 8
    np.testing.assert_allclose(linear_forward(x, layer), ref, atol=1e-6)


def test_linear_int4_matches_dequantize_first_oracle(rng):
    w = rng.normal(size=(5, 8))
    layer = MultiPrecisionLayer("l", w, current=4)
    x = rng.normal(size=(3, 8))
    expected = x @ scalar_dequantize(layer.available[4]).T + layer.bias.astype(np.float64)
    np.testing.assert_allclose(linear_forward(x, layer), expected, atol=1e-6)


def test_linear_records_traffic(rng):
    layer = MultiPrecisionLayer("l", rng.normal(size=(4, 8)), current=4)
    acc = TrafficAccountant()
    linear_forward(np.ones((1, 8)), layer, acc)
    linear_forward(np.ones((3, 8)), layer, acc)
    assert acc.bytes_touched == 2 * 32 * 4 // 8


def test_linear_missing_rung():
    layer = MultiPrecisionLayer("l", np.ones((2, 2)))
    del layer.available[4]
    layer.current = 4
    with pytest.raises(StateError):
        linear_forward(np.ones((1, 2)), layer)


# -- attention -----------------------------------------------------------------

def test_attention_single_key_returns_value(rng):
    v = rng.normal(size=(1, 4))
    assert np.array_equal(attention(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), v), v)


def test_attention_identical_keys_average_visible_values(rng):
    k = np.tile(rng.normal(size=(1, 4)), (5, 1))
    v = rng.normal(size=(5, 4))
    out = attention(rng.normal(size=(3, 4)), k, v, causal_offset=2)
    for i in range(3):
        np.testing.assert_allclose(out[i], v[: 3 + i].mean(axis=0), atol=1e-12)


def test_attention_matches_naive_oracle(rng):
    q, k, v = rng.normal(size=(3, 6)), rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    np.testing.assert_allclose(attention(q, k, v), naive_attention(q, k, v, 0), atol=1e-6)
    np.testing.assert_allclose(attention(q[1:], k, v, 1), naive_attention(q[1:], k, v, 1), atol=1e-6)


def test_attention_weights_sum_to_one(rng):
    q, k = rng.normal(size=(4, 5)), rng.normal(size=(7, 5))
    np.testing.assert_allclose(attention(q, k, np.ones((7, 5)), causal_offset=3), 1.0, atol=1e-6)


def test_attention_empty_keys():
    with pytest.raises(StateError):
        attention(np.ones((1, 2)), np.zeros((0, 2)), np.zeros((0, 2)))


# -- forward passes -------------------------------------------------------------

def test_single_token_prefill_equals_empty_cache_decode(small_model):
    logits, _ = small_model.forward_prefill([42])
    cache = KvCache.empty(small_model.config)
    np.testing.assert_allclose(small_model.forward_decode(42, cache), logits[0], atol=1e-6)
    assert cache.length == 1


def test_prefill_then_decode_matches_longer_prefill(small_model, rng):
    toks = rng.integers(0, 256, size=12).tolist()
    _, cache = small_model.forward_prefill(toks[:-1])
    step = small_model.forward_decode(toks[-1], cache)
    full, _ = small_model.forward_prefill(toks)
    np.testing.assert_allclose(step, full[-1], atol=1e-5)


def test_prefill_is_deterministic(small_model):
    a, _ = small_model.forward_prefill([1, 2, 3, 4])
    b, _ = small_model.forward_prefill([1, 2, 3, 4])
    assert np.array_equal(a, b)


def test_cached_greedy_rollout_equals_no_cache_rollout(small_model):
    toks = [10, 20, 30]
    logits, cache = small_model.forward_prefill(toks)
    cached = [int(np.argmax(logits[-1]))]
    for _ in range(15):
        cached.append(int(np.argmax(small_model.forward_decode(cached[-1], cache))))
    seq = list(toks)
    for _ in range(16):
        seq.append(int(np.argmax(small_model.forward_prefill(seq)[0][-1])))
    assert cached == seq[3:]


def test_cache_capacity_boundary():
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=1, ffn_dim=8, max_seq_len=6)
    m = TinyTransformer.random(cfg, seed=1)
    _, cache = m.forward_prefill([1, 2, 3, 4])
    m.forward_decode(5, cache)  # length 5 == max_seq_len - 1 before this call
    assert cache.length == 5
    m.forward_decode(6, cache)
    assert cache.length == 6
    with pytest.raises(CapacityError):
        m.forward_decode(7, cache)


def test_prompt_errors(small_model):
    with pytest.raises(InputError):
        small_model.forward_prefill([256])
    with pytest.raises(InputError):
        small_model.forward_prefill([])
    with pytest.raises(CapacityError):
        small_model.forward_prefill([0] * (SMALL.max_seq_len + 1))


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=2, max_size=20), st.data())
def test_causality(toks, data):
    m = TinyTransformer.random(SMALL, seed=7)
    t = data.draw(st.integers(1, len(toks) - 1))
    other = list(toks)
    other[t] = (other[t] + 1) % 256
    a, _ = m.forward_prefill(toks)
    b, _ = m.forward_prefill(other)
    assert np.array_equal(a[:t], b[:t])


def test_zero_model_is_uniform():
    m = TinyTransformer.zeros(SMALL)
    logits, _ = m.forward_prefill([3, 1, 4, 1, 5])
    assert np.all(logits == 0)


# -- precision management ---------------------------------------------------------

def test_set_precision_noop_emits_nothing(small_model):
    lid = small_model.layer_ids()[0]
    assert small_model.set_precision(lid, FP_BITS) is None
    assert small_model.switch_events == []


def test_ladder_strictly_lowers_effective_bits(small_model):
    lid = small_model.layer_ids()[0]
    b0 = small_model.effective_bits()
    ev1 = small_model.set_precision(lid, 8)
    b1 = small_model.effective_bits()
    ev2 = small_model.set_precision(lid, 4)
    b2 = small_model.effective_bits()
    assert b0 > b1 > b2
    assert (ev1.from_bits, ev1.to_bits, ev2.from_bits, ev2.to_bits) == (16, 8, 8, 4)
    assert small_model.switch_events == [ev1, ev2]


def test_set_precision_errors(small_model):
    with pytest.raises(StateError):
        small_model.set_precision("nope", 8)
    with pytest.raises(StateError):
        small_model.set_precision(small_model.layer_ids()[0], 2)


def test_switch_does_not_touch_payloads(small_model):
    before = {k: (l.available[16].tobytes(), l.available[8].to_bytes(), l.available[4].to_bytes())
              for k, l in small_model.linears.items()}
    for lid in small_model.layer_ids()[::2]:
        small_model.set_precision(lid, 4)
    after = {k: (l.available[16].tobytes(), l.available[8].to_bytes(), l.available[4].to_bytes())
             for k, l in small_model.linears.items()}
    assert before == after


def test_switch_takes_effect_on_next_forward(small_model):
    toks = [5, 6, 7, 8]
    fp, _ = small_model.forward_prefill(toks)
    small_model.set_all_precision(4)
    q4, _ = small_model.forward_prefill(toks)
    assert not np.array_equal(fp, q4)


def test_effective_bits_examples():
    a = MultiPrecisionLayer("a", np.ones((4, 4)), current=8)
    b = MultiPrecisionLayer("b", np.ones((4, 4)), current=4)
    assert effective_bits([a, a]) == 8.0
    assert effective_bits([a, b]) == 6.0


def test_effective_bits_mid_schedule(small_model):
    ids = small_model.layer_ids()
    small_model.set_all_precision(8)
    small_model.set_precision(ids[0], 4)   # attn.q 32x32
    small_model.set_precision(ids[4], 4)   # mlp.up 64x32
    # 12 layers: per block 4 x 1024 + 2 x 2048 = 8192 params; 16384 total
    expected = (16384 * 8 - 1024 * 4 - 2048 * 4) / 16384
    assert small_model.effective_bits() == pytest.approx(expected, abs=1e-9)


def test_weight_bytes_per_token(small_model):
    small_model.set_all_precision(4)
    assert small_model.weight_bytes_per_token() == 16384 * 4 // 8
