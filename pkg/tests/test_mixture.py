import numpy as np
import pytest

from amos import autodiff as ad
from amos.autodiff import ParameterSet
from amos.data import MASK_ID, MaskedBatch
from amos.encoder import embed
from amos.generator import GeneratorForwardResult
from amos.mixture import (build_replaced_sequence, constant_weights, gumbel_softmax_sample,
                          log_probabilities, mixed_distribution, mixture_weights)


def result_with_features(features, heads=None):
    depths = tuple(sorted(features))
    result = GeneratorForwardResult(depths=depths, trunk=None, positions=(np.zeros(0), np.zeros(0)))
    for d in depths:
        result.f[d] = ad.constant(features[d])
        if heads is not None:
            result.h[d] = ad.constant(heads[d])
    return result


def test_single_head_weight_is_one():
    result = result_with_features({3: np.random.default_rng(0).normal(size=(5, 4))})
    gamma = mixture_weights(result, ad.constant(np.ones(4)))
    np.testing.assert_array_equal(gamma.data, np.ones((5, 1)))


def test_zero_v_gives_uniform_weights():
    rng = np.random.default_rng(0)
    result = result_with_features({d: rng.normal(size=(5, 4)) for d in (2, 3, 4)})
    gamma = mixture_weights(result, ad.constant(np.zeros(4)))
    np.testing.assert_allclose(gamma.data, 1.0 / 3)


def test_softmax_arithmetic():
    f = {d: np.array([[np.log(d - 1.0), 0.0]]) for d in (2, 3, 4)}
    gamma = mixture_weights(result_with_features(f), ad.constant(np.array([1.0, 0.0])))
    np.testing.assert_allclose(gamma.data[0], [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_one_hot_gamma_selects_head():
    rng = np.random.default_rng(2)
    shared = ad.constant(rng.normal(size=(10, 4)))
    heads = {d: rng.normal(size=(3, 4)) for d in (1, 2)}
    result = result_with_features({d: np.zeros((3, 4)) for d in (1, 2)}, heads)
    out = mixed_distribution(result, constant_weights(3, [0.0, 1.0]), shared)
    np.testing.assert_array_equal(out.h_bar.data, heads[2])
    expected = ad.log_softmax(ad.constant(heads[2] @ shared.data.T)).data
    np.testing.assert_allclose(out.log_pi.data, expected, atol=1e-12)


@pytest.mark.parametrize("pi", [np.full(4, 0.25), np.array([0.7, 0.2, 0.1])])
def test_gumbel_max_frequencies(pi):
    rng = np.random.default_rng(11)
    probs = np.tile(pi, (100000, 1))
    sample = gumbel_softmax_sample(log_probabilities(probs), 0.3, rng)
    freq = np.bincount(sample.hard, minlength=len(pi)) / 100000
    assert np.abs(freq - pi).max() < 0.01
    assert 0.5 * np.abs(freq - pi).sum() < 0.01


def test_gumbel_one_hot_is_exact():
    probs = np.tile([0.0, 1.0, 0.0], (1000, 1))
    sample = gumbel_softmax_sample(log_probabilities(probs), 0.3, np.random.default_rng(0))
    assert (sample.hard == 1).all()


def test_gumbel_soft_rows_are_distributions():
    log_pi = ad.log_softmax(ad.constant(np.random.default_rng(0).normal(size=(6, 9))))
    sample = gumbel_softmax_sample(log_pi, 0.3, np.random.default_rng(1))
    np.testing.assert_allclose(sample.soft.data.sum(axis=-1), 1.0)
    np.testing.assert_array_equal(sample.hard, np.argmax(sample.soft.data, axis=-1))


def test_gumbel_rejects_bad_temperature():
    with pytest.raises(ValueError):
        gumbel_softmax_sample(log_probabilities(np.full((1, 2), 0.5)), 0.0, np.random.default_rng(0))


def test_gumbel_rejects_probabilities():
    with pytest.raises(ValueError, match="log-probabilities"):
        gumbel_softmax_sample(np.full((3, 4), 0.25), 0.3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="log-probabilities"):
        gumbel_softmax_sample(ad.constant(np.tile([0.0, 1.0, 0.0], (2, 1))), 0.3, np.random.default_rng(0))


def test_gumbel_reads_arrays_and_tensors_alike():
    log_pi = np.log(np.tile([0.5, 0.3, 0.2], (50, 1)))
    a = gumbel_softmax_sample(log_pi, 0.3, np.random.default_rng(4))
    b = gumbel_softmax_sample(ad.constant(log_pi), 0.3, np.random.default_rng(4))
    np.testing.assert_array_equal(a.hard, b.hard)
    np.testing.assert_array_equal(a.soft.data, b.soft.data)


def near_one_hot_rate(pi, tau, draws=2000, seed=21):
    probs = np.tile(pi, (draws, 1))
    sample = gumbel_softmax_sample(log_probabilities(probs), tau, np.random.default_rng(seed))
    return (sample.soft.data.max(axis=-1) > 0.999).mean()


def test_low_temperature_is_near_one_hot_for_peaked_pi():
    # 首位概率 0.99：前两名扰动后 logit 相差不足 τ·ln(999) 的概率约 0.15%
    pi = np.array([0.99] + [0.01 / 7] * 7)
    assert near_one_hot_rate(pi, 0.01) >= 0.99


def test_uniform_pi_needs_lower_temperature():
    # 均匀 π 下前两名的差服从 Exp(1)，τ = 0.01 时约 6% 的样本达不到 0.999
    pi = np.full(8, 1 / 8)
    assert near_one_hot_rate(pi, 0.01) < 0.97
    assert near_one_hot_rate(pi, 1e-4) >= 0.99


def test_replaced_sequence_labels_and_forward_identity():
    original = np.array([[3, 4, 5, 6]])
    mask = np.array([[True, False, True, False]])
    batch = MaskedBatch(original=original, masked=np.where(mask, MASK_ID, original), mask=mask)
    params = ParameterSet()
    shared = params.add("shared.token_embedding", np.random.default_rng(0).normal(size=(8, 4)), "shared")
    # 第一个掩码位置必然采到原词 3，第二个必然采到 7
    probs = np.zeros((2, 8))
    probs[0, 3] = 1.0
    probs[1, 7] = 1.0
    sample = gumbel_softmax_sample(log_probabilities(probs), 0.3, np.random.default_rng(0))
    replaced = build_replaced_sequence(batch, sample, shared)
    assert replaced.replaced.tolist() == [[3, 4, 7, 6]]
    assert replaced.is_original.tolist() == [[True, True, False, True]]
    assert replaced.replaced_count == 1

    base = embed(replaced.replaced, shared)
    with_carrier = ad.scatter_add(base, replaced.positions, replaced.carrier)
    np.testing.assert_array_equal(with_carrier.data, base.data)
