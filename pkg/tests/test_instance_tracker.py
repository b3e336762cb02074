import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vpstrack.errors import BadMagic, EmptySupervision, ShapeMismatch, TruncatedFile
from vpstrack.instance_tracker import (
    EmbeddingHeadParams, EmbeddingSet, MatchSupervision, TrainConfig, TrainingPair, batch_loss_and_gradients,
    correlate, decode_checkpoint, embed, encode_checkpoint, expected_target, instance_correlation,
    load_checkpoint, loss_and_gradients, match_softmax, matching_loss, pair_loss, save_checkpoint, train,
)
from vpstrack.masks import InstanceMask

from oracles import numeric_gradient


def test_embed_zero_roi_zero_bias():
    p = EmbeddingHeadParams.init(6, 4, 3, seed=1)
    p.b1[:] = 0
    p.b2[:] = 0
    assert np.array_equal(embed(np.zeros((2, 3)), p), np.zeros(3))


def test_embed_identity_params():
    d = 6
    p = EmbeddingHeadParams(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))
    roi = (np.arange(d).reshape(2, 3) % 2).astype(float)
    assert np.array_equal(embed(roi, p), roi.ravel())


def test_embed_matches_scalar_loop():
    rng = np.random.default_rng(3)
    p = EmbeddingHeadParams.init(8, 5, 4, seed=3)
    roi = (rng.random((2, 4)) > 0.5).astype(float)
    x = roi.ravel()
    hidden = []
    for k in range(5):
        acc = p.b1[k]
        for i in range(8):
            acc += x[i] * p.W1[i, k]
        hidden.append(max(acc, 0.0))
    expected = []
    for k in range(4):
        acc = p.b2[k]
        for i in range(5):
            acc += hidden[i] * p.W2[i, k]
        expected.append(acc)
    np.testing.assert_allclose(embed(roi, p), expected, rtol=1e-12, atol=1e-14)


def test_embed_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        embed(np.zeros(5), EmbeddingHeadParams.init(6, 4, 3))


def test_embed_positively_homogeneous_without_bias():
    p = EmbeddingHeadParams.init(6, 5, 3, seed=2)
    p.b1[:] = 0
    p.b2[:] = 0
    x = np.random.default_rng(0).random(6)
    assert np.array_equal(embed(4.0 * x, p), 4.0 * embed(x, p))


def test_correlate_examples():
    q = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))[0]
    np.testing.assert_allclose(correlate(q, q), np.eye(4), atol=1e-12)
    assert np.array_equal(correlate(np.ones((2, 3)), np.zeros((4, 3))), np.zeros((2, 4)))
    M = EmbeddingSet(np.array([[1, 2], [3, -1]]))
    N = EmbeddingSet(np.array([[2, 0], [1, 1], [-1, 4]]))
    # hand-computed dot products
    assert correlate(M, N).tolist() == [[2, 3, 7], [6, 2, -7]]


def test_softmax_examples():
    assert np.allclose(match_softmax(np.full((1, 4), 2.5)), 0.25)
    np.testing.assert_allclose(match_softmax(np.array([[0.0, math.log(3)]])), [[0.25, 0.75]], rtol=1e-15)
    row = np.array([[0.3, -1.2, 2.0]])
    np.testing.assert_allclose(match_softmax(row + 1000), match_softmax(row), rtol=0, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_rows_and_shift(seed, c):
    logits = np.random.default_rng(seed).normal(0, 3, (3, 5))
    P = match_softmax(logits)
    assert np.all(np.abs(P.sum(1) - 1) <= 1e-9)
    assert np.all(P > 0)
    np.testing.assert_allclose(match_softmax(logits + c), P, rtol=0, atol=1e-12)


def test_expected_target_examples():
    assert expected_target(np.array([[0, 0, 1.0]]), 0) == 2.0
    assert expected_target(np.full((1, 3), 1 / 3), 0) == pytest.approx(1.0, abs=1e-15)
    assert expected_target(np.array([[0.25, 0.75]]), 0) == 0.75


def test_matching_loss_examples():
    assert matching_loss(np.eye(3), MatchSupervision(((0, 0), (1, 1), (2, 2)))) == 0.0
    assert matching_loss(np.array([[0.5, 0.5]]), MatchSupervision(((0, 0),))) == pytest.approx(0.693147, abs=1e-6)
    P = np.array([[0.5, 0.5, 0.0], [0.25, 0.25, 0.5]])
    # (ln 2 + ln 4) / 2
    assert matching_loss(P, MatchSupervision(((0, 1), (1, 0)))) == pytest.approx(1.039721, abs=1e-6)
    with pytest.raises(EmptySupervision):
        matching_loss(P, MatchSupervision(()))


def test_binary_loss_form():
    P = np.array([[0.5, 0.25, 0.25]])
    expected = -(math.log(0.5) + 2 * math.log(0.75))
    assert matching_loss(P, MatchSupervision(((0, 0),)), "binary") == pytest.approx(expected)


def _toy(seed, d_embed=None):
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    d_embed = d_embed or int(rng.integers(2, 17))
    h, w = 3, 4
    Xa = (rng.random((m, h * w)) > 0.5).astype(float)
    Xb = (rng.random((n, h * w)) > 0.5).astype(float)
    cols = rng.permutation(n)
    k = int(rng.integers(1, min(m, n) + 1))
    sup = MatchSupervision(tuple((i, int(cols[i])) for i in range(k)))
    params = EmbeddingHeadParams.init(h * w, int(rng.integers(3, 9)), d_embed, seed)
    return Xa, Xb, params, sup


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("form", ["categorical", "binary"])
@pytest.mark.parametrize("cosine", [False, True])
def test_gradients_match_finite_differences(form, cosine):
    for seed in range(5):
        Xa, Xb, params, sup = _toy(seed)
        _, g = loss_and_gradients(Xa, Xb, params, sup, form, cosine)
        num = numeric_gradient(lambda v: pair_loss(Xa, Xb, params.with_flat(v), sup, form, cosine), params.flat())
        assert _rel_err(g.flat(), np.array(num)) <= 1e-4


def test_batch_gradient_equals_mean_of_pair_gradients():
    toys = [_toy(s, d_embed=5) for s in range(3)]
    params = EmbeddingHeadParams.init(12, 6, 5, seed=9)
    data = [TrainingPair(a, b, s) for a, b, _, s in toys]
    loss, g = batch_loss_and_gradients(data, params)
    singles = [loss_and_gradients(p.prev_rois, p.cur_rois, params, p.supervision) for p in data]
    assert loss == pytest.approx(np.mean([l for l, _ in singles]), rel=1e-12)
    np.testing.assert_allclose(g.flat(), np.mean([s.flat() for _, s in singles], axis=0), rtol=1e-10, atol=1e-14)


def test_descent_direction_reduces_loss():
    Xa, Xb, params, sup = _toy(11)
    loss0, g = loss_and_gradients(Xa, Xb, params, sup)
    step = params.with_flat(params.flat() - 1e-3 * g.flat())
    assert pair_loss(Xa, Xb, step, sup) < loss0


def test_loss_flat_along_row_constant_logit_direction():
    # Moving b2 along u orthogonal to every current-frame embedding adds
    # <M_i, u> + |u|^2 to row i of the logits: a per-row constant.
    Xa, Xb, params, sup = _toy(5, d_embed=12)
    E_cur = np.array([embed(x, params) for x in Xb])
    u = np.linalg.svd(E_cur)[2][-1]
    assert np.allclose(E_cur @ u, 0, atol=1e-12)
    eps = 1e-3
    plus, minus = params.copy(), params.copy()
    plus.b2 += eps * u
    minus.b2 -= eps * u
    base = pair_loss(Xa, Xb, params, sup)
    assert pair_loss(Xa, Xb, plus, sup) == pytest.approx(base, abs=1e-12)
    assert pair_loss(Xa, Xb, minus, sup) == pytest.approx(base, abs=1e-12)
    _, g = loss_and_gradients(Xa, Xb, params, sup)
    assert abs(g.b2 @ u) < 1e-10


def test_train_is_deterministic_and_decreasing():
    data = [TrainingPair(a, b, s) for a, b, _, s in (_toy(k, d_embed=6) for k in range(6))]
    data = [TrainingPair(p.prev_rois, p.cur_rois, p.supervision) for p in data]
    cfg = TrainConfig(lr=0.1, epochs=30, seed=4, d_embed=6, batch_size=2)
    a, b = train(data, cfg), train(data, cfg)
    assert a.loss_trace == b.loss_trace
    assert np.array_equal(a.params.flat(), b.params.flat())
    full = train(data, TrainConfig(lr=0.1, epochs=30, seed=4, d_embed=6))
    assert full.loss_trace[-1] < full.loss_trace[0]


def test_instance_correlation_rows_are_distributions():
    rng = np.random.default_rng(0)
    masks = [InstanceMask(rng.random((20, 30)) < 0.3, 11, i + 1) for i in range(4)]
    params = EmbeddingHeadParams.init(8 * 16, 16, 16, seed=0)
    m = instance_correlation(masks[:3], masks, params, 8, 16)
    assert m.kind == "instance" and m.shape == (3, 4)
    assert np.all(np.abs(m.scores.sum(1) - 1) <= 1e-9) and np.all(m.scores > 0)
    assert m.row_ids == (1, 2, 3)


def test_checkpoint_roundtrip(tmp_path):
    p = EmbeddingHeadParams.init(12, 5, 3, seed=8)
    path = tmp_path / "head.vpse"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"VPSE" and len(raw) == 20 + 8 * (12 * 5 + 5 + 5 * 3 + 3)
    back = load_checkpoint(path)
    assert np.array_equal(back.flat(), p.flat())
    assert encode_checkpoint(back) == raw
    with pytest.raises(BadMagic):
        decode_checkpoint(b"VPSX" + raw[4:])
    with pytest.raises(TruncatedFile):
        decode_checkpoint(raw[:-8])
