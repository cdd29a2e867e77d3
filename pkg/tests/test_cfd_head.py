import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfx import numcore as nc
from cfx.cfd_head import (
    CNN_FILTERS,
    CfdModel,
    InputError,
    aggregate_cls,
    aggregate_cnn,
    aggregate_combined,
    bce_loss,
    classify,
    cnn_pool,
    init_classifier_params,
    init_cnn_params,
    predict,
)
from cfx.encoder import EncoderConfig, LayerStack, cls_vector, init_mix_params, scalar_mix
from cfx.numcore import Tape, Tensor, parameter
from cfx.tokenizer import pack_classification

from gradcheck import TOL, group_errors


def naive_cnn(tokens, w, b, window=3):
    n, d = tokens.shape
    if n < window:
        left = (window - n) // 2
        tokens = np.vstack([np.zeros((left, d)), tokens, np.zeros((window - n - left, d))])
    feats = []
    for i in range(tokens.shape[0] - window + 1):
        flat = tokens[i : i + window].reshape(-1)
        feats.append([math.tanh(sum(flat[t] * w[t, f] for t in range(len(flat))) + b[f]) for f in range(w.shape[1])])
    return np.max(np.array(feats), axis=0)


def small_cnn(d, filters=5, seed=0):
    cnn = init_cnn_params(d, filters, 3, np.random.default_rng(seed))
    cnn["cnn.b"].data[:] = np.random.default_rng(seed + 1).normal(size=filters)
    return cnn


def test_aggregate_cls_identity_and_gradient():
    c = parameter([1.0, 2.0])
    assert aggregate_cls(c) is c
    with Tape() as tape:
        loss = nc.tsum(aggregate_cls(c) * Tensor([3.0, -1.0]))
    tape.backward(loss)
    np.testing.assert_array_equal(c.grad, [3.0, -1.0])


def test_aggregate_cls_matches_mix_then_cls():
    rng = np.random.default_rng(0)
    stack = LayerStack([Tensor(rng.normal(size=(6, 4))) for _ in range(3)])
    mix = init_mix_params(3)
    mix["mix.logits"].data[:] = rng.normal(size=3)
    weights = np.exp(mix["mix.logits"].data) / np.exp(mix["mix.logits"].data).sum()
    expected = sum(wt * s.data[0] for wt, s in zip(weights, stack.states))
    np.testing.assert_allclose(aggregate_cls(cls_vector(scalar_mix(stack, mix))).data, expected, atol=1e-12)


def test_cnn_single_token_is_centred():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(1, 4))
    cnn = small_cnn(4)
    expected = np.tanh(np.concatenate([np.zeros(4), h[0], np.zeros(4)]) @ cnn["cnn.w"].data + cnn["cnn.b"].data)
    np.testing.assert_allclose(aggregate_cnn(Tensor(h), cnn).data, expected, rtol=0, atol=1e-12)


def test_cnn_identical_rows():
    row = np.random.default_rng(2).normal(size=4)
    cnn = small_cnn(4)
    expected = np.tanh(np.tile(row, 3) @ cnn["cnn.w"].data + cnn["cnn.b"].data)
    np.testing.assert_allclose(aggregate_cnn(Tensor(np.tile(row, (7, 1))), cnn).data, expected, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 6, 9])
def test_cnn_matches_naive_sliding_window(n):
    rng = np.random.default_rng(n)
    tokens = rng.normal(size=(n, 4))
    cnn = small_cnn(4, filters=6, seed=n)
    got = aggregate_cnn(Tensor(tokens), cnn).data
    np.testing.assert_allclose(got, naive_cnn(tokens, cnn["cnn.w"].data, cnn["cnn.b"].data), rtol=0, atol=1e-12)


def test_cnn_batched_matches_per_sequence():
    rng = np.random.default_rng(3)
    lengths = [1, 4, 2, 5]
    rows = rng.normal(size=(sum(lengths), 4))
    index, start = [], 0
    for n in lengths:
        index.append(list(range(start, start + n)))
        start += n
    cnn = small_cnn(4)
    batched = cnn_pool(Tensor(rows), index, cnn).data
    for b, ix in enumerate(index):
        np.testing.assert_allclose(batched[b], aggregate_cnn(Tensor(rows[ix]), cnn).data, atol=1e-12)


def test_cnn_empty_rejected():
    with pytest.raises(InputError):
        aggregate_cnn(Tensor(np.zeros((0, 4))), small_cnn(4))


def test_cnn_reversal_of_identical_rows():
    tokens = np.tile(np.random.default_rng(4).normal(size=4), (5, 1))
    cnn = small_cnn(4)
    np.testing.assert_array_equal(aggregate_cnn(Tensor(tokens), cnn).data, aggregate_cnn(Tensor(tokens[::-1]), cnn).data)


def test_combined_concatenates():
    cnn = {"cnn.w": Tensor(np.zeros((6, 1))), "cnn.b": Tensor([np.arctanh(0.75)])}
    out = aggregate_combined(Tensor([1.0, 2.0]), Tensor(np.ones((2, 2))), cnn)
    np.testing.assert_allclose(out.data, [1.0, 2.0, 0.75], atol=1e-15)
    zero_c = aggregate_combined(Tensor(np.zeros(2)), Tensor(np.ones((2, 2))), cnn)
    np.testing.assert_array_equal(zero_c.data[:2], 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 7))
def test_combined_length(d, n, filters):
    rng = np.random.default_rng(d * 100 + n)
    out = aggregate_combined(Tensor(rng.normal(size=d)), Tensor(rng.normal(size=(n, d))), small_cnn(d, filters))
    assert out.shape == (d + filters,)


def test_default_cnn_size():
    assert CNN_FILTERS == 300
    cnn = init_cnn_params(8, CNN_FILTERS, 3, np.random.default_rng(0))
    assert aggregate_cnn(Tensor(np.ones((4, 8))), cnn).shape == (300,)


def test_classify_examples():
    params = {"cls.w": Tensor(np.zeros(3)), "cls.b": Tensor([0.0])}
    assert classify(Tensor([1.0, -2.0, 3.0]), params).item() == 0.5
    params["cls.b"].data[:] = 10.0
    assert classify(Tensor([1.0, -2.0, 3.0]), params).item() == pytest.approx(0.9999546, abs=1e-7)


def test_classify_matches_formula():
    rng = np.random.default_rng(5)
    r, w, b = rng.normal(size=7), rng.normal(size=7), rng.normal()
    z = sum(ri * wi for ri, wi in zip(r, w)) + b
    params = {"cls.w": Tensor(w), "cls.b": Tensor([b])}
    assert classify(Tensor(r), params).item() == pytest.approx(1 / (1 + math.exp(-z)), rel=1e-14)
    batch = rng.normal(size=(4, 7))
    expected = [1 / (1 + math.exp(-(row @ w + b))) for row in batch]
    np.testing.assert_allclose(classify(Tensor(batch), params).data, expected, rtol=1e-14)


def test_classify_dimension_mismatch():
    with pytest.raises(nc.ShapeError):
        classify(Tensor(np.ones(4)), init_classifier_params(3, np.random.default_rng(0)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.floats(0.05, 0.95))
def test_threshold_rule_invariant_under_monotone_transform(scores, threshold):
    params = {"cls.w": Tensor([1.0]), "cls.b": Tensor([0.0])}
    probs = classify(Tensor(np.array(scores).reshape(-1, 1)), params).data
    direct = [predict(p, threshold) for p in probs]
    z_t = math.log(threshold / (1 - threshold))
    via_score = [int(3.0 * z + 1.0 >= 3.0 * z_t + 1.0) for z in scores]
    for z, a, b in zip(scores, direct, via_score):
        if abs(z - z_t) > 1e-9:
            assert a == b


def test_bce_examples():
    assert bce_loss([0.5], [1]).item() == pytest.approx(math.log(2), rel=1e-15)
    assert bce_loss([1.0 - 1e-12], [1]).item() == pytest.approx(0.0, abs=1e-11)
    assert bce_loss([1.0], [1]).item() == pytest.approx(1e-12, rel=1e-3)
    assert bce_loss([0.0], [1]).item() == pytest.approx(-math.log(1e-12))


def test_bce_matches_formula():
    rng = np.random.default_rng(6)
    p = rng.uniform(0.01, 0.99, size=20)
    y = rng.integers(0, 2, size=20)
    expected = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y))
    assert bce_loss(p, y).item() == pytest.approx(expected, rel=1e-13)
    assert bce_loss(p, y, reduction="mean").item() == pytest.approx(expected / 20, rel=1e-13)


def test_bce_rejects_bad_labels():
    with pytest.raises(InputError):
        bce_loss([0.3], [2])
    with pytest.raises(InputError):
        bce_loss([0.3, 0.4], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=10))
def test_bce_nonnegative(pairs):
    p, y = zip(*pairs)
    assert bce_loss(list(p), list(y)).item() >= 0


def test_predict_boundary_and_sweep():
    assert predict(0.5) == 1 and predict(0.49) == 0
    probs = np.random.default_rng(7).uniform(size=200)
    counts = [sum(predict(p, t) for p in probs) for t in np.linspace(0, 1, 41)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_head_gradients():
    rng = np.random.default_rng(8)
    tokens = Tensor(rng.normal(size=(5, 4)))
    c = Tensor(rng.normal(size=4))
    params = small_cnn(4, filters=6)
    params.update(init_classifier_params(10, rng))
    params["cls.w"].data[:] = rng.normal(size=10)
    labels = [1]
    err = group_errors(
        lambda: bce_loss(classify(aggregate_combined(c, tokens, params), params).reshape(1), labels),
        params,
        max_entries=None,
    )
    assert max(err.values()) <= TOL, err


@pytest.mark.parametrize("aggregation", ["cls", "cnn", "cls+cnn"])
def test_model_forward_shapes_and_dims(small_vocab, aggregation):
    enc = EncoderConfig(vocab_size=len(small_vocab), layers=2, hidden=8, heads=2, ffn=16, max_len=40, dropout=0.0)
    model = CfdModel.create(enc, aggregation, seed=0, cnn_filters=5)
    expected_dim = {"cls": 8, "cnn": 5, "cls+cnn": 13}[aggregation]
    assert model.params["cls.w"].shape == (expected_dim,)
    packs = [pack_classification(s, small_vocab, 40) for s in ("the doctor had", "the team had")]
    probs = model.predict_proba(packs)
    assert probs.shape == (2,) and np.all((probs > 0) & (probs < 1))
    assert model.loss(packs, [1, 0]).item() > 0


def test_model_rejects_unknown_aggregation(small_vocab):
    with pytest.raises(ValueError):
        CfdModel.create(EncoderConfig(vocab_size=len(small_vocab), layers=1, hidden=8, heads=2), "mean")
