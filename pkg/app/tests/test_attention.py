"""
Tests for the gated attention module
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.config.settings import AttentionConfig
from app.errors import ShapeError
from app.models import attention
from app.tensor import Tape, grad_check_many


def naive_block(x, weight, bias, dilation):
    """3x3 dilated conv with padding = dilation followed by ReLU, written as plain loops."""
    n, c, h, w = x.shape
    out = np.zeros((n, weight.shape[0], h, w))
    for b in range(n):
        for o in range(weight.shape[0]):
            for y in range(h):
                for z in range(w):
                    total = bias[o]
                    for ci in range(c):
                        for i in range(3):
                            for j in range(3):
                                yy, zz = y + (i - 1) * dilation, z + (j - 1) * dilation
                                if 0 <= yy < h and 0 <= zz < w:
                                    total += weight[o, ci, i, j] * x[b, ci, yy, zz]
                    out[b, o, y, z] = max(total, 0.0)
    return out


def naive_attention(x, params, rates):
    """Semantic map, gates and attention map computed one element at a time."""
    hidden = naive_block(x, params["attention.block1.weight"], params["attention.block1.bias"], rates[0])
    hidden = naive_block(hidden, params["attention.block2.weight"], params["attention.block2.bias"], rates[1])
    n, c, h, w = x.shape
    s = np.zeros((n, 1, h, w))
    gates = np.zeros((n, c))
    omega = np.zeros((n, 1, h, w))
    for b in range(n):
        m = [[sum(hidden[b, k, y, z] for k in range(c)) for z in range(w)] for y in range(h)]
        peak = max(max(row) for row in m)
        total = sum(math.exp(m[y][z] - peak) for y in range(h) for z in range(w))
        for y in range(h):
            for z in range(w):
                s[b, 0, y, z] = math.exp(m[y][z] - peak) / total
        for k in range(c):
            corr = sum(x[b, k, y, z] * s[b, 0, y, z] for y in range(h) for z in range(w))
            gates[b, k] = max(math.tanh(corr), 0.0)
        for y in range(h):
            for z in range(w):
                omega[b, 0, y, z] = sum(gates[b, k] * x[b, k, y, z] for k in range(c)) / c
    return s, gates, omega


def run_attention(x, params, config=AttentionConfig()):
    tape = Tape()
    leaves = {name: tape.leaf(array, name=name) for name, array in params.items()}
    return attention.gated_attention(tape, tape.constant(x), leaves, config)


class TestGatedAttention:
    """Tests for semantic map, gates and attention map"""

    @pytest.fixture(scope="class")
    def rng(self):
        return np.random.default_rng(42)

    def test_matches_naive_loops(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 9))
            h, w = (int(v) for v in rng.integers(2, 7, size=2))
            x = rng.normal(size=(n, c, h, w))
            params = attention.init_attention_params(rng, c)
            params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
            rates = tuple(int(v) for v in rng.choice([1, 2, 4], size=2))

            out = run_attention(x, params, AttentionConfig(dilation_rates=rates))
            s, gates, omega = naive_attention(x, params, rates)
            assert_allclose(out.semantic_map.data, s, atol=1e-10)
            assert_allclose(out.gates.data, gates, atol=1e-10)
            assert_allclose(out.attention_map.data, omega, atol=1e-10)

    def test_zero_weights_give_uniform_map(self):
        params = {k: np.zeros_like(v) for k, v in attention.init_attention_params(np.random.default_rng(0), 3).items()}
        x = np.random.default_rng(1).normal(size=(1, 3, 4, 5))
        out = run_attention(x, params)
        assert not out.aggregated_map.data.any()
        assert_allclose(out.semantic_map.data, np.full((1, 1, 4, 5), 1 / 20), atol=1e-15)

    def test_semantic_map_sums_to_one(self, rng):
        x = rng.normal(size=(2, 4, 5, 5))
        out = run_attention(x, attention.init_attention_params(rng, 4))
        assert_allclose(out.semantic_map.data.sum(axis=(2, 3)), 1.0, atol=1e-9)

    def test_gate_hand_example(self):
        tape = Tape()
        x = tape.constant(np.array([[[[2.0]], [[-3.0]]]]))
        s = tape.constant(np.ones((1, 1, 1, 1)))
        gates = attention.channel_gates(tape, x, s)
        assert_allclose(gates.data, [[0.9640275800, 0.0]], atol=1e-10)

        omega = attention.attention_map(tape, x, s, gates)
        assert omega.data.item() == pytest.approx(0.9640275800, abs=1e-10)

    def test_zero_features(self):
        tape = Tape()
        x = tape.constant(np.zeros((1, 3, 4, 4)))
        s = tape.constant(np.full((1, 1, 4, 4), 1 / 16))
        gates = attention.channel_gates(tape, x, s)
        assert not gates.data.any()
        assert not attention.attention_map(tape, x, s, gates).data.any()

    def test_gate_range(self, rng):
        x = rng.normal(size=(2, 6, 5, 5)) * 5
        gates = run_attention(x, attention.init_attention_params(rng, 6)).gates.data
        assert gates.min() >= 0.0
        assert gates.max() < 1.0

    def test_average_mode_is_channel_mean(self, rng):
        x = rng.uniform(size=(1, 4, 5, 5))
        out = run_attention(x, attention.init_attention_params(rng, 4), AttentionConfig(attention_mode="average"))
        assert_allclose(out.attention_map.data, x.mean(axis=1, keepdims=True), atol=1e-15)

    def test_channel_permutation_invariance(self, rng):
        x = rng.normal(size=(1, 5, 6, 6))
        params = attention.init_attention_params(rng, 5)
        perm = rng.permutation(5)
        permuted = dict(params)
        permuted["attention.block1.weight"] = params["attention.block1.weight"][:, perm]

        reference = run_attention(x, params)
        shuffled = run_attention(x[:, perm], permuted)
        assert_allclose(shuffled.semantic_map.data, reference.semantic_map.data, atol=1e-12)
        assert_allclose(shuffled.attention_map.data, reference.attention_map.data, atol=1e-12)
        assert_allclose(shuffled.gates.data, reference.gates.data[:, perm], atol=1e-12)

    def test_gate_monotone_in_channel_scale(self, rng):
        x = rng.uniform(0.1, 1.0, size=(1, 3, 4, 4))
        s = np.full((1, 1, 4, 4), 1 / 16)
        previous = -1.0
        for scale in (1.0, 2.0, 5.0, 50.0):
            tape = Tape()
            scaled = x.copy()
            scaled[:, 0] *= scale
            gate = attention.channel_gates(tape, tape.constant(scaled), tape.constant(s)).data[0, 0]
            assert gate >= previous
            previous = gate

    def test_map_shape_mismatch(self):
        tape = Tape()
        x = tape.constant(np.ones((1, 2, 4, 4)))
        s = tape.constant(np.ones((1, 1, 3, 4)))
        with pytest.raises(ShapeError):
            attention.attention_map(tape, x, s, tape.constant(np.ones((1, 2))))

    def test_gradients_of_attention_sum(self, rng):
        params = attention.init_attention_params(rng, 3)
        params = {k: v + 0.05 * rng.uniform(0.1, 1.0, size=v.shape) for k, v in params.items()}
        arrays = {"x": rng.uniform(0.1, 1.0, size=(1, 3, 5, 5)), **params}
        config = AttentionConfig()

        report = grad_check_many(
            lambda tape, v: tape.sum_all(attention.gated_attention(tape, v["x"], v, config).attention_map),
            arrays,
        )
        assert max(report.values()) < 1e-4

    def test_init_layout(self):
        params = attention.init_attention_params(np.random.default_rng(0), 2)
        assert sorted(params) == [
            "attention.block1.bias",
            "attention.block1.weight",
            "attention.block2.bias",
            "attention.block2.weight",
        ]
        assert params["attention.block2.weight"].shape == (2, 2, 3, 3)
        assert_array_equal(params["attention.block1.bias"], np.zeros(2))
