import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flexquant.analyzer import (
    HIST_SMOOTHING,
    LayerKlReport,
    SwitchPlan,
    analyze_model,
    build_ladder_plan,
    build_switch_plan,
    histogram_edges,
    kl_divergence,
    loads_plan,
    weight_histogram,
)
from flexquant.errors import DimensionError, FormatError, InputError
from flexquant.model import ModelConfig, TinyTransformer


def naive_histogram(values, edges):
    counts = [0] * (len(edges) - 1)
    for v in values:
        v = min(max(v, edges[0]), edges[-1])
        for i in range(len(counts)):
            last = i == len(counts) - 1
            if edges[i] <= v < edges[i + 1] or (last and v == edges[-1]):
                counts[i] += 1
                break
    p = [c / len(values) + HIST_SMOOTHING for c in counts]
    total = sum(p)
    return [x / total for x in p]


def scalar_kl(row_major, n, bins):
    """KL(original || quantized) with element-wise affine quantization per row."""
    w = [list(map(float, r)) for r in row_major]
    deq = []
    for row in w:
        lo, hi = min(row), max(row)
        s = struct.unpack("<f", struct.pack("<f", (hi - lo) / (2**n - 1)))[0]
        z = round(-lo / s)
        deq.extend((min(max(round(x / s + z), 0), 2**n - 1) - z) * s for x in row)
    flat = [x for r in w for x in r]
    lo, hi = min(flat), max(flat)
    edges = [lo + (hi - lo) * i / bins for i in range(bins + 1)]
    edges[-1] = hi
    p, q = naive_histogram(flat, edges), naive_histogram(deq, edges)
    return sum(a * math.log(a / b) for a, b in zip(p, q))


def test_single_bin_histogram():
    np.testing.assert_allclose(weight_histogram([0.5], [0.0, 1.0]), [1.0])


def test_two_bin_uniform_histogram(rng):
    p = weight_histogram(rng.uniform(0, 1, 20000), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(p, [0.5, 0.5], atol=0.02)


def test_histogram_matches_naive_counting(rng):
    w = rng.normal(size=300)
    edges = histogram_edges(w, 17)
    np.testing.assert_allclose(weight_histogram(w, edges), naive_histogram(w.tolist(), edges.tolist()), atol=1e-12)


def test_histogram_rejects_bad_input():
    with pytest.raises(InputError):
        weight_histogram([], [0.0, 1.0])
    with pytest.raises(InputError):
        weight_histogram([0.5], [1.0, 0.0])


def test_kl_of_identical_is_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert abs(kl_divergence(p, p)) <= 1e-12


def test_kl_hand_value():
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.14384, abs=1e-5)


def test_kl_extreme_value_matches_direct_evaluation():
    import mpmath

    mpmath.mp.dps = 50
    eps = 1e-10
    p = [1 / (1 + eps), eps / (1 + eps)]
    q = [eps / (1 + eps), 1 / (1 + eps)]
    exact = sum(mpmath.mpf(a) * mpmath.log(mpmath.mpf(a) / mpmath.mpf(b)) for a, b in zip(p, q))
    assert kl_divergence(p, q) == pytest.approx(float(exact), abs=1e-9)
    assert kl_divergence(p, q) > 20


def test_kl_length_mismatch():
    with pytest.raises(DimensionError):
        kl_divergence([0.5, 0.5], [1.0])


prob_vectors = arrays(np.float64, st.integers(1, 30), elements=st.floats(1e-6, 1.0)).map(lambda a: a / a.sum())


@given(st.data())
def test_kl_nonnegative(data):
    p = data.draw(prob_vectors)
    q = data.draw(arrays(np.float64, p.shape, elements=st.floats(1e-6, 1.0)).map(lambda a: a / a.sum()))
    assert kl_divergence(p, q) >= -1e-12


def test_grid_exact_layer_has_zero_kl():
    levels = np.tile(np.arange(16), (4, 2)).astype(float)
    w = (levels - 8) * 2.0**-4
    for n in (4, 8):
        (r,) = analyze_model({"layer": w}, n, bins=64)
        assert r.kl <= 1e-9


def test_four_bit_kl_exceeds_eight_bit_on_fixture():
    weights = TinyTransformer.random(ModelConfig(), seed=0).linear_weights()
    k8 = {r.layer_id: r.kl for r in analyze_model(weights, 8)}
    k4 = {r.layer_id: r.kl for r in analyze_model(weights, 4)}
    assert all(k4[k] >= k8[k] for k in weights)


def test_three_layer_order_matches_scalar_oracle(rng):
    weights = {f"layer{i}": rng.normal(0, 1, (4, 24)) * rng.uniform(0.5, 2, (4, 1)) for i in range(3)}
    weights["layer1"][:, 0] *= 8  # heavy outliers quantize worst
    reports = analyze_model(weights, 4, bins=32)
    oracle = {k: scalar_kl(w, 4, 32) for k, w in weights.items()}
    for r in reports:
        assert r.kl == pytest.approx(oracle[r.layer_id], rel=1e-9, abs=1e-12)
    plan = build_switch_plan(reports, 8, 4)
    assert [e.layer_id for e in plan] == sorted(oracle, key=lambda k: (oracle[k], k))


def test_empty_layer_skipped(caplog):
    reports = analyze_model({"empty": np.zeros((0, 4)), "full": np.ones((2, 2))}, 8, bins=8)
    assert [r.layer_id for r in reports] == ["full"]
    assert "empty" in caplog.text


def test_plan_sorts_by_kl():
    reports = [LayerKlReport("layer1", 4, 0.3, 10), LayerKlReport("layer2", 4, 0.1, 10), LayerKlReport("layer3", 4, 0.2, 10)]
    assert [e.layer_id for e in build_switch_plan(reports, 8, 4)] == ["layer2", "layer3", "layer1"]


def test_plan_ties_break_lexicographically():
    reports = [LayerKlReport("b", 4, 0.1, 1), LayerKlReport("a", 4, 0.1, 1), LayerKlReport("c", 4, 0.0, 1)]
    assert [e.layer_id for e in build_switch_plan(reports, 8, 4)] == ["c", "a", "b"]


def test_plan_rejects_duplicates_and_empty():
    with pytest.raises(InputError):
        build_switch_plan([LayerKlReport("a", 4, 0.1, 1), LayerKlReport("a", 4, 0.2, 1)], 8, 4)
    with pytest.raises(InputError):
        build_switch_plan([], 8, 4)


def test_plan_file_round_trip(tmp_path, small_model):
    plan = build_ladder_plan(small_model.linear_weights())
    path = tmp_path / "plan.txt"
    plan.save(path)
    assert path.read_text().splitlines()[0] == "flexquant-plan v1"
    assert SwitchPlan.load(path) == plan


def test_plan_file_rejects_bad_header():
    with pytest.raises(FormatError):
        loads_plan("not-a-plan\n")
    with pytest.raises(FormatError):
        loads_plan("flexquant-plan v1\nlayer=a from=8\n")


def test_analysis_is_deterministic(small_model):
    w = small_model.linear_weights()
    assert build_ladder_plan(w) == build_ladder_plan(w)


def test_ladder_plan_structure(small_model):
    plan = build_ladder_plan(small_model.linear_weights())
    n = len(small_model.linears)
    assert len(plan) == 2 * n
    assert {(e.from_bits, e.to_bits) for e in plan[:n]} == {(16, 8)}
    assert {(e.from_bits, e.to_bits) for e in plan[n:]} == {(8, 4)}
    for block in (plan[:n], plan[n:]):
        assert [(e.kl, e.layer_id) for e in block] == sorted((e.kl, e.layer_id) for e in block)
