import math

import numpy as np
import pytest

from config import get_gate_function
from errors import ConfigError, ScoringError, ShapeError
from gates.common import keep_top_k
from gates.expert_choice import ec_gate
from gates.gshard import gshard_gate, noisy_logits
from gates.sigmoid import sigmoid_gate
from gates.xmoe import xmoe_gate

INSTANCES = 1000


def _top_k_oracle(row, k):
    return sorted(range(len(row)), key=lambda i: (-row[i], i))[:k]


def _softmax_oracle(values):
    peak = max(values)
    exps = [math.exp(v - peak) for v in values]
    return [x / sum(exps) for x in exps]


def test_keep_top_k():
    np.testing.assert_array_equal(keep_top_k([0.1, 0.5, 0.3], 1), [-np.inf, 0.5, -np.inf])
    np.testing.assert_array_equal(keep_top_k([7, 7, 7], 2), [7, 7, -np.inf])
    np.testing.assert_array_equal(keep_top_k([3, 1, 2], 3), [3, 1, 2])
    with pytest.raises(ConfigError):
        keep_top_k([1, 2], 3)


def test_gshard_worked_cases():
    gate = gshard_gate(np.eye(3)[:1], np.array([[1.0, 3.0, 2.0], [0, 0, 0], [0, 0, 0]]), k=1)
    assert gate.experts.tolist() == [[1]]
    assert gate.weights[0, 0] == pytest.approx(1.0)

    gate = gshard_gate(np.ones((1, 1)), np.zeros((1, 2)), k=2)
    assert gate.experts.tolist() == [[0, 1]]
    np.testing.assert_allclose(gate.weights, [[0.5, 0.5]])


def test_gshard_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(INSTANCES):
        tokens = rng.standard_normal((3, 4))
        w_gate = rng.standard_normal((4, 5))
        gate = gshard_gate(tokens, w_gate, k=2)
        logits = tokens @ w_gate
        for t, row in enumerate(logits.tolist()):
            chosen = _top_k_oracle(row, 2)
            assert gate.experts[t].tolist() == chosen
            np.testing.assert_allclose(gate.weights[t], _softmax_oracle([row[i] for i in chosen]), rtol=1e-12)


def test_gshard_noise():
    rng = np.random.default_rng(1)
    tokens, w_gate, w_noise = rng.standard_normal((4, 3)), rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
    first = noisy_logits(tokens, w_gate, w_noise, noise_enabled=True, rng_seed=5)
    second = noisy_logits(tokens, w_gate, w_noise, noise_enabled=True, rng_seed=5)
    np.testing.assert_array_equal(first, second)
    assert not np.allclose(first, tokens @ w_gate)
    with pytest.raises(ShapeError):
        noisy_logits(tokens, w_gate, None, noise_enabled=True)


def test_gshard_noise_scale_is_softplus():
    tokens = np.array([[1.0], [1.0]])
    w_gate = np.zeros((1, 2))
    # noise logits of -800 and 800: softplus is 0 and 800, neither overflows
    w_noise = np.array([[-800.0, 800.0]])
    logits = noisy_logits(tokens, w_gate, w_noise, noise_enabled=True, rng_seed=7)
    draws = np.random.default_rng(7).standard_normal((2, 2))
    assert np.all(np.isfinite(logits))
    np.testing.assert_allclose(logits[:, 0], 0.0, atol=1e-300)
    np.testing.assert_allclose(logits[:, 1], 800.0 * draws[:, 1], rtol=1e-12)


def test_sigmoid_worked_cases():
    gate = sigmoid_gate(np.ones((1, 1)), np.array([[-1.0, 4.0]]), k=1)
    assert gate.experts.tolist() == [[1]]
    assert gate.weights[0, 0] == pytest.approx(1 / (1 + math.exp(-4)))

    gate = sigmoid_gate(np.ones((1, 1)), np.array([[0.0, -5.0]]), k=1)
    assert gate.weights[0, 0] == pytest.approx(0.5)

    logits = np.array([[0.3, -1.2, 2.0]])
    gate = sigmoid_gate(np.ones((1, 1)), logits, k=3)
    assert sorted(gate.experts[0].tolist()) == [0, 1, 2]
    for slot, expert in enumerate(gate.experts[0]):
        assert gate.weights[0, slot] == pytest.approx(1 / (1 + math.exp(-logits[0, expert])))


def test_sigmoid_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(INSTANCES):
        tokens = rng.standard_normal((3, 4))
        w_gate = rng.standard_normal((4, 6))
        gate = sigmoid_gate(tokens, w_gate, k=2)
        for t, row in enumerate((tokens @ w_gate).tolist()):
            chosen = _top_k_oracle(row, 2)
            assert gate.experts[t].tolist() == chosen
            np.testing.assert_allclose(gate.weights[t], [1 / (1 + math.exp(-row[i])) for i in chosen], rtol=1e-9)


def test_xmoe_worked_cases():
    identity = np.eye(2)
    gate = xmoe_gate(np.array([[2.0, 0.0]]), identity, np.array([[3.0, 0.0], [0.0, 1.0]]), k=1)
    assert gate.experts.tolist() == [[0]]
    assert gate.scores[0, 0] == pytest.approx(1.0)

    gate = xmoe_gate(np.array([[-1.0, -1.0]]), identity, np.array([[1.0], [1.0]]), k=1)
    assert gate.experts.tolist() == [[0]]
    assert gate.scores[0, 0] == pytest.approx(-1.0)


def test_xmoe_errors():
    identity = np.eye(2)
    with pytest.raises(ScoringError):
        xmoe_gate(np.zeros((1, 2)), identity, np.ones((2, 2)), k=1)
    with pytest.raises(ScoringError):
        xmoe_gate(np.ones((1, 2)), identity, np.array([[1.0, 0.0], [1.0, 0.0]]), k=1)
    with pytest.raises(ShapeError):
        xmoe_gate(np.ones((1, 2)), np.ones((2, 3)), np.ones((3, 2)), k=1)


def test_xmoe_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(INSTANCES):
        tokens = rng.standard_normal((3, 6))
        w_proj = rng.standard_normal((6, 3))
        w_gate = rng.standard_normal((3, 4))
        gate = xmoe_gate(tokens, w_proj, w_gate, k=2)
        projected = tokens @ w_proj
        for t in range(tokens.shape[0]):
            row = [
                float(projected[t] @ w_gate[:, e] / (np.linalg.norm(projected[t]) * np.linalg.norm(w_gate[:, e])))
                for e in range(w_gate.shape[1])
            ]
            chosen = _top_k_oracle(row, 2)
            assert gate.experts[t].tolist() == chosen
            np.testing.assert_allclose(gate.scores[t], [row[i] for i in chosen], rtol=1e-9)
            np.testing.assert_allclose(gate.weights[t], _softmax_oracle([row[i] for i in chosen]), rtol=1e-9)


def test_ec_worked_cases():
    gate = ec_gate(np.eye(2), np.array([[9.0, 0.0], [0.0, 9.0]]), capacity_k=1)
    assert gate.experts.tolist() == [[0, -1], [1, -1]]
    np.testing.assert_allclose(gate.weights[:, 0], [1.0, 1.0])

    rng = np.random.default_rng(4)
    gate = ec_gate(rng.standard_normal((3, 2)), rng.standard_normal((2, 4)), capacity_k=3)
    assert gate.experts.tolist() == [[0, 1, 2, 3]] * 3

    with pytest.raises(ConfigError):
        ec_gate(np.eye(2), np.eye(2), capacity_k=3)


def test_ec_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(INSTANCES):
        tokens = rng.standard_normal((5, 3))
        w_gate = rng.standard_normal((3, 4))
        gate = ec_gate(tokens, w_gate, capacity_k=2)
        logits = tokens @ w_gate
        for e in range(4):
            column = logits[:, e].tolist()
            picked = _top_k_oracle(column, 2)
            weights = _softmax_oracle([column[t] for t in picked])
            for t, w in zip(picked, weights):
                slot = gate.experts[t].tolist().index(e)
                assert gate.weights[t, slot] == pytest.approx(w, rel=1e-12)
            for t in set(range(5)) - set(picked):
                assert e not in gate.experts[t].tolist()


def test_gate_registry():
    assert get_gate_function("GShard") is gshard_gate
    assert get_gate_function("ec") is ec_gate
    assert get_gate_function("softmoe") is None
