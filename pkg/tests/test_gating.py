import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moelab.gating import (
    TokenBatch,
    TokenFileError,
    ZeroNormTokenError,
    affinity_scores,
    gate_probabilities,
    grap_weights,
    load_tokens,
    save_tokens_bin,
    save_tokens_csv,
)


def test_grap_weights_half_slices():
    gw = grap_weights(4, 2)
    np.testing.assert_array_equal(gw.weights, [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])
    assert gw.p == 2


def test_grap_weights_p1_is_identity():
    np.testing.assert_array_equal(grap_weights(4, 4).weights, np.eye(4))


@pytest.mark.parametrize("d, n", [(6, 4), (0, 2), (4, 0), (5, 2)])
def test_grap_weights_rejects_bad_shapes(d, n):
    with pytest.raises(ValueError):
        grap_weights(d, n)


@pytest.mark.parametrize("n, p", [(1, 7), (3, 5), (8, 8), (16, 1)])
def test_grap_rows_orthogonal_and_average(n, p):
    w = grap_weights(n * p, n).weights
    gram = w @ w.T
    assert np.all(gram[~np.eye(n, dtype=bool)] == 0.0)
    x = np.arange(n * p, dtype=float)
    np.testing.assert_allclose(w @ x, x.reshape(n, p).mean(axis=1))


def test_affinity_examples():
    gw = grap_weights(4, 2)
    np.testing.assert_allclose(affinity_scores([[1, 0, 0, 0]], gw), [[0.70710678118654752, 0.0]], atol=1e-15)
    np.testing.assert_allclose(affinity_scores([[1, 1, 1, 1]], gw), [[0.70710678118654752] * 2], atol=1e-15)


def test_zero_token_names_row():
    with pytest.raises(ZeroNormTokenError, match="index 0"):
        affinity_scores([[0, 0, 0, 0]], grap_weights(4, 2))
    with pytest.raises(ZeroNormTokenError) as info:
        affinity_scores([[1, 0, 0, 0], [0, 0, 0, 0]], grap_weights(4, 2))
    assert info.value.index == 1


token_rows = arrays(
    np.float64, st.tuples(st.integers(1, 6), st.just(8)),
    elements=st.floats(-100, 100, allow_nan=False, width=64),
).filter(lambda x: np.all(np.linalg.norm(x, axis=1) > 1e-6))


@given(token_rows, st.floats(1e-3, 1e3))
def test_scale_invariance_and_range(x, c):
    gw = grap_weights(8, 4)
    a = affinity_scores(x, gw)
    np.testing.assert_allclose(affinity_scores(c * x, gw), a, atol=1e-12)
    np.testing.assert_allclose(affinity_scores(x, grap_weights(8, 4).weights * 3.0), a, atol=1e-12)
    assert np.all(a >= -1 - 1e-12) and np.all(a <= 1 + 1e-12)


def test_gate_probabilities_examples():
    np.testing.assert_allclose(gate_probabilities([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)
    e = math.e
    expected = [e / (e + 3), 1 / (e + 3), 1 / (e + 3), 1 / (e + 3)]
    np.testing.assert_allclose(gate_probabilities([[1.0, 0, 0, 0]]), [expected], rtol=1e-14)
    np.testing.assert_allclose(expected, [0.47536689, 0.17487770, 0.17487770, 0.17487770], atol=1e-8)


def test_gate_noise_is_seeded():
    s = np.random.default_rng(0).uniform(-1, 1, (5, 4))
    a = gate_probabilities(s, 0.3, seed=7)
    np.testing.assert_array_equal(a, gate_probabilities(s, 0.3, seed=7))
    assert not np.array_equal(a, gate_probabilities(s, 0.3, seed=8))
    with pytest.raises(ValueError):
        gate_probabilities(s, -1.0)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=st.floats(-1, 1)))
def test_softmax_rows_and_argmax(scores):
    g = gate_probabilities(scores)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
    # score gaps below float resolution collapse to equal gates; the top score still gets the top gate
    top = np.argmax(scores, axis=1)
    np.testing.assert_array_equal(g[np.arange(len(g)), top], g.max(axis=1))
    gap = np.sort(scores, axis=1)
    clear = gap[:, -1] - (gap[:, -2] if scores.shape[1] > 1 else -np.inf) > 1e-9
    np.testing.assert_array_equal(np.argmax(g, axis=1)[clear], top[clear])


def test_token_batch_rejects_nonfinite():
    with pytest.raises(ValueError, match="token 1"):
        TokenBatch(np.array([[1.0, 2.0], [np.nan, 0.0]]))


def test_csv_round_trip(tmp_path):
    x = np.random.default_rng(1).standard_normal((5, 3))
    save_tokens_csv(x, tmp_path / "t.csv")
    np.testing.assert_array_equal(load_tokens(tmp_path / "t.csv").tokens, x)


def test_bin_round_trip(tmp_path):
    x = np.random.default_rng(1).standard_normal((5, 3)).astype(np.float32)
    save_tokens_bin(x, tmp_path / "t.bin")
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:8] == (5).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(raw) == 8 + 5 * 3 * 4
    np.testing.assert_array_equal(load_tokens(tmp_path / "t.bin").tokens, x.astype(np.float64))


def test_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3,x\n")
    with pytest.raises(TokenFileError, match="line 2"):
        load_tokens(bad)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("1,2\n3,4\n5\n")
    with pytest.raises(TokenFileError) as info:
        load_tokens(ragged)
    assert info.value.line == 3
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(TokenFileError, match="no tokens"):
        load_tokens(empty)


def test_bin_size_mismatch(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes((2).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"\0" * 12)
    with pytest.raises(TokenFileError):
        load_tokens(p)
