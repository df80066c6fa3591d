import math

import numpy as np
import pytest
from scipy.special import log_softmax

from dual_skew_seq2seq.divergences import (
    Aggregation,
    LossKind,
    cdsd_loss,
    cross_entropy,
    dsd_loss,
    kl,
    loss_for_kind,
    one_hot,
    sample_divergence,
    skew_divergence,
    smoothed_targets,
    token_weights,
)
from dual_skew_seq2seq.errors import ConfigError, DataError, DimensionError


def probs(logits):
    return np.exp(log_softmax(logits, axis=-1))


def random_batch(rng, rows=1000, vocab=8):
    logits = rng.normal(scale=2.0, size=(rows, vocab))
    targets = rng.integers(0, vocab, size=rows)
    return logits, targets


def test_cross_entropy_uniform():
    out = cross_entropy(np.zeros((1, 4)), [2])
    assert out.value == pytest.approx(math.log(4), abs=1e-9)
    assert out.value == pytest.approx(1.386294, abs=1e-6)


def test_cross_entropy_perfect_prediction():
    logits = np.array([[0.0, 60.0, 0.0]])
    assert cross_entropy(logits, [1]).value == pytest.approx(0.0, abs=1e-9)


def test_cross_entropy_smoothed_two_way():
    out = cross_entropy(np.log([[0.6, 0.4]]), [0], smoothing=0.1)
    expected = 0.9 * -math.log(0.6) + 0.1 * -math.log(0.4)
    assert out.value == pytest.approx(expected, abs=1e-9)
    assert out.value == pytest.approx(0.551, abs=1e-3)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(DataError):
        cross_entropy(np.zeros((1, 4)), [4])


def test_cross_entropy_equals_forward_kl(rng):
    logits, targets = random_batch(rng)
    q = one_hot(targets, 8)
    expected = float(np.mean(kl(q, probs(logits), "forward")))
    assert abs(cross_entropy(logits, targets).value - expected) < 1e-9


def test_kl_cases():
    q = np.array([1.0, 0.0])
    p = np.array([0.5, 0.5])
    assert kl(q, q) == pytest.approx(0.0, abs=1e-12)
    assert kl(p, p, "reverse") == pytest.approx(0.0, abs=1e-12)
    assert kl(q, p) == pytest.approx(math.log(2), abs=1e-9)
    assert kl(q, p, "forward") != pytest.approx(kl(q, p, "reverse"), abs=1e-3)


def test_kl_length_mismatch():
    with pytest.raises(DimensionError):
        kl([1.0, 0.0], [0.2, 0.3, 0.5])


def test_skew_divergence_cases(rng):
    first = np.array([0.2, 0.3, 0.5])
    second = rng.dirichlet(np.ones(3))
    assert skew_divergence(first, first, 0.3) == pytest.approx(0.0, abs=1e-12)
    assert skew_divergence(first, second, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert skew_divergence([1.0, 0.0], [0.0, 1.0], 0.01) == pytest.approx(math.log(100), abs=1e-9)
    assert skew_divergence([1.0, 0.0], [0.0, 1.0], 0.01) == pytest.approx(4.60517, abs=1e-5)


def test_skew_divergence_bad_alpha():
    with pytest.raises(ConfigError):
        skew_divergence([0.5, 0.5], [0.5, 0.5], 1.5)


def test_skew_limit_is_kl(rng):
    first = rng.dirichlet(np.full(6, 5.0), size=50)
    second = rng.dirichlet(np.full(6, 5.0), size=50)
    np.testing.assert_allclose(skew_divergence(first, second, 1e-8), kl(first, second), atol=1e-6)


def test_dsd_zero_on_matching_prediction():
    logits = np.array([[100.0, 0.0, 0.0, 0.0]])
    q = one_hot([0], 4)
    for beta in (0.0, 0.3, 1.0):
        assert dsd_loss(logits, q, alpha=0.01, beta=beta).value == pytest.approx(0.0, abs=1e-9)


def test_dsd_uniform_beta_one():
    out = dsd_loss(np.zeros((1, 4)), one_hot([1], 4), alpha=0.01, beta=1.0)
    assert out.value == pytest.approx(-math.log(0.99 / 4 + 0.01), abs=1e-9)
    assert out.value == pytest.approx(1.3568, abs=1e-4)


def test_dsd_endpoint_reductions(rng):
    logits, targets = random_batch(rng)
    q = one_hot(targets, 8)
    p = probs(logits)
    toward_data = float(np.mean(skew_divergence(q, p, 0.01)))
    toward_model = float(np.mean(skew_divergence(p, q, 0.01)))
    assert abs(dsd_loss(logits, q, 0.01, beta=1.0).value - toward_data) < 1e-9
    assert abs(dsd_loss(logits, q, 0.01, beta=0.0).value - toward_model) < 1e-9


def test_dsd_nonnegative_on_one_hot(rng):
    logits, targets = random_batch(rng, rows=200)
    q = one_hot(targets, 8)
    for beta in np.linspace(0.0, 1.0, 11):
        assert np.all(dsd_loss(logits, q, 0.01, beta).per_row >= -1e-9)


def test_dsd_validation():
    with pytest.raises(ConfigError):
        dsd_loss(np.zeros((1, 4)), one_hot([0], 4), beta=1.5)
    with pytest.raises(DataError):
        dsd_loss(np.zeros((1, 4)), [[0.5, 0.6, 0.0, 0.0]], beta=0.5)


@pytest.mark.parametrize("beta_t", [0.855, 0.95, 0.85])
def test_cdsd_is_dsd_at_controller_beta(rng, beta_t):
    logits, targets = random_batch(rng, rows=16)
    q = one_hot(targets, 8)
    a = cdsd_loss(logits, q, beta_t=beta_t)
    b = dsd_loss(logits, q, beta=beta_t)
    assert a.value == b.value
    assert np.array_equal(a.grad_logits, b.grad_logits)


def test_sample_divergence_cases():
    q = one_hot([0, 2], 4)
    assert sample_divergence(q, q) == pytest.approx(0.0, abs=1e-9)

    uniform = np.full((1, 4), 0.25)
    single = sample_divergence(uniform, one_hot([3], 4), alpha=0.01)
    assert single == pytest.approx(1.3568, abs=1e-4)

    p = np.array([[0.25, 0.25, 0.25, 0.25], [0.7, 0.1, 0.1, 0.1]])
    rows = skew_divergence(q, p, 0.01)
    assert sample_divergence(p, q, 0.01, Aggregation.MEAN_PER_TOKEN) == pytest.approx(rows.mean(), abs=1e-12)


def test_sample_divergence_sum_per_sentence():
    p = np.full((3, 4), 0.25)
    q = one_hot([0, 1, 2], 4)
    value = sample_divergence(p, q, 0.01, Aggregation.SUM_PER_SENTENCE, sentence_ids=[0, 0, 1])
    per_row = -math.log(0.99 / 4 + 0.01)
    # sentence 0 has two positions, sentence 1 has one
    assert value == pytest.approx((2 * per_row + per_row) / 2, abs=1e-9)


def test_sample_divergence_empty_batch():
    with pytest.raises(DataError):
        sample_divergence(np.zeros((0, 4)), np.zeros((0, 4)))


def test_token_weights_mean_per_sentence_then_batch():
    np.testing.assert_allclose(token_weights([0, 0, 1]), [0.25, 0.25, 0.5])
    assert token_weights([5, 5, 5, 7]).sum() == pytest.approx(1.0)


def test_smoothed_targets_rows_sum_to_one():
    q = smoothed_targets([0, 3], 4, 0.1)
    np.testing.assert_allclose(q.sum(axis=-1), 1.0)
    assert q[0, 0] == pytest.approx(0.9)
    assert q[0, 1] == pytest.approx(0.1 / 3)


def test_loss_for_kind_dispatch(rng):
    logits, targets = random_batch(rng, rows=8)
    assert loss_for_kind(LossKind.XENT, logits, targets).value == cross_entropy(logits, targets).value
    smoothed = loss_for_kind(LossKind.XENT_SMOOTH, logits, targets, smoothing=0.1)
    assert smoothed.value == cross_entropy(logits, targets, smoothing=0.1).value
    dsd = loss_for_kind(LossKind.DSD, logits, targets, beta=0.5)
    assert dsd.value == dsd_loss(logits, one_hot(targets, 8), beta=0.5).value
    with pytest.raises(ConfigError):
        loss_for_kind(LossKind.CDSD, logits, targets)
