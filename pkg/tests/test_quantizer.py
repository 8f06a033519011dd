import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from outlierfree.attention import Hooks, ModelConfig, forward_tokens, init_params, zero_params
from outlierfree.checkpoint import Checkpoint
from outlierfree.errors import AlphaOutOfRange, ConfigError, EmptySample, InvalidBits, MissingStats, ZeroRange
from outlierfree.quantizer import (
    CalibrationStats,
    MigrationHooks,
    QuantSpec,
    activation_sites,
    calibrate,
    fake_quant,
    logit_deviation,
    migration_scales,
    parse_bits,
    quantize_model,
    smoothquant_migrate,
)
from outlierfree.tensor_core import make_rng

values = arrays(np.float64, st.integers(1, 40), elements=st.floats(-10, 10, allow_nan=False))


def test_fake_quant_examples():
    assert fake_quant(0.5, 8, 1.0) == 64 / 127
    assert fake_quant(3.2, 4, 7.0) == 3.0
    for bits in (4, 6, 8):
        assert fake_quant(0.0, bits, 2.0) == 0.0
    # ties go to even: 2.5 -> 2, 3.5 -> 4 with scale 1
    assert fake_quant([2.5, 3.5, -2.5], 4, 7.0).tolist() == [2.0, 4.0, -2.0]
    # clamp beyond the range
    assert fake_quant([100.0, -100.0], 8, 1.0).tolist() == [1.0, -1.0]


def test_fake_quant_errors():
    for bits in (2, 16, 7):
        with pytest.raises(InvalidBits):
            fake_quant(1.0, bits, 1.0)
    with pytest.raises(ZeroRange):
        fake_quant([1.0], 8, 0.0)
    assert fake_quant(np.zeros(3), 8, 0.0).tolist() == [0, 0, 0]


def test_fake_quant_asymmetric():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    assert np.allclose(fake_quant(x, 8, None, symmetric=False), x, atol=3 / 255 / 2)
    assert fake_quant(x, 4, None, symmetric=False, minmax=(0.0, 3.0))[0] == 0.0
    y = fake_quant(np.array([-1.0, 5.0]), 8, None, symmetric=False)
    assert np.allclose(y, [-1.0, 5.0], atol=6 / 255 / 2 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(values, st.sampled_from([4, 6, 8]))
def test_round_trip_bound_and_idempotence(x, bits):
    absmax = float(np.max(np.abs(x)))
    if absmax == 0:
        return
    scale = absmax / (2 ** (bits - 1) - 1)
    q = fake_quant(x, bits, absmax)
    assert np.all(np.abs(q - x) <= scale / 2 + 1e-12)
    assert np.array_equal(fake_quant(q, bits, absmax), q)


def test_subnormal_range_passes_through():
    # absmax / qmax underflows to zero; the grid is finer than float64 can hold
    x = np.array([5e-324, 0.0])
    assert np.array_equal(fake_quant(x, 4, 5e-324), x)
    assert np.array_equal(fake_quant(x, 8, None, symmetric=False), x)


@settings(max_examples=200, deadline=None)
@given(values, st.sampled_from([4, 6, 8]), st.floats(0.1, 20))
def test_monotone_under_shared_scale(x, bits, absmax):
    xs = np.sort(x)
    q = fake_quant(xs, bits, absmax)
    assert np.all(np.diff(q) >= 0)


def test_error_ordering_over_bits():
    rng = make_rng(0)
    for _ in range(50):
        x = rng.standard_t(3, size=500)
        a = float(np.max(np.abs(x)))
        mse = [np.mean((fake_quant(x, b, a) - x) ** 2) for b in (4, 6, 8)]
        assert mse[0] >= mse[1] >= mse[2]


def test_per_channel_absmax_broadcast():
    x = np.array([[1.0, -0.5], [10.0, 4.0]])
    q = fake_quant(x, 8, np.array([[1.0], [10.0]]))
    assert np.allclose(q, x, atol=10 / 127 / 2)
    assert q[0, 0] == 1.0 and q[1, 0] == 10.0


def test_quant_spec_and_bits_parsing():
    assert parse_bits("8W/8A") == (8, 8)
    assert parse_bits("4w/16a") == (4, 16)
    with pytest.raises(ConfigError):
        parse_bits("8/8")
    with pytest.raises(InvalidBits):
        parse_bits("5W/8A")
    with pytest.raises(InvalidBits):
        QuantSpec(weight_bits=3)
    with pytest.raises(ConfigError):
        QuantSpec(granularity="per_group")
    with pytest.raises(AlphaOutOfRange):
        QuantSpec(smoothquant_alpha=1.5)
    assert QuantSpec(16, 16).passthrough
    assert QuantSpec(6, 6).label == "6W/6A"


def test_smoothquant_examples():
    assert smoothquant_migrate([4.0], [1.0], 0.5).tolist() == [2.0]
    assert np.allclose(smoothquant_migrate([4.0, 9.0], [2.0, 0.5], 0.0), [0.5, 2.0])
    assert smoothquant_migrate([0.0], [0.0], 1.0)[0] == 1e-8
    with pytest.raises(AlphaOutOfRange):
        smoothquant_migrate([1.0], [1.0], -0.1)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0, 1), st.integers(0, 2 ** 31))
def test_migration_matrix_identity(n, d, alpha, seed):
    rng = make_rng(seed)
    w = rng.normal(size=(5, d))
    x = rng.normal(size=(d, n)) * rng.uniform(0.01, 100, size=(d, 1))
    s = smoothquant_migrate(np.max(np.abs(x), axis=1), np.max(np.abs(w), axis=0), alpha)
    ref = w @ x
    got = (w * s[None, :]) @ (x / s[:, None])
    assert np.max(np.abs(got - ref)) <= 1e-12 * max(1.0, np.max(np.abs(ref)))


def _model(variant="softmax", mode="practical", seed=0, std=0.3):
    cfg = ModelConfig(layers=2, heads=2, model_dim=8, ffn_dim=16, vocab_size=12, max_seq_len=16, variant=variant,
                      block_mode=mode, alibi=mode == "practical")
    return Checkpoint(cfg, init_params(cfg, make_rng(seed), std=std))


def _sample(n=4, seed=1):
    rng = make_rng(seed)
    return [rng.integers(0, 12, size=int(rng.integers(3, 16))) for _ in range(n)]


def test_calibration_running_max():
    ck = _model()
    a, b = _sample(1, 2), _sample(1, 3)
    both = calibrate(ck, a + b)
    sa, sb = calibrate(ck, a), calibrate(ck, b)
    assert set(both.sites) == set(activation_sites(ck.config))
    for site, st_ in both.sites.items():
        assert st_.absmax == max(sa.sites[site].absmax, sb.sites[site].absmax)
        if st_.channel_absmax is not None:
            assert np.array_equal(st_.channel_absmax,
                                  np.maximum(sa.sites[site].channel_absmax, sb.sites[site].channel_absmax))
    with pytest.raises(EmptySample):
        calibrate(ck, [])


def test_calibration_observes_absmax():
    stats = CalibrationStats()
    stats.observe("x", np.array([[[-3.0, 2.0]]]))
    assert stats.sites["x"].absmax == 3.0
    assert stats.sites["x"].lo == -3.0 and stats.sites["x"].hi == 2.0


@pytest.mark.parametrize("mode", ["formal", "practical"])
def test_passthrough_is_bit_identical(mode):
    ck = _model(mode=mode)
    sample = _sample()
    q = quantize_model(ck, QuantSpec(16, 16), calibrate(ck, sample))
    for s in sample:
        assert np.array_equal(q.logits(s[None]), forward_tokens(s[None], ck.params, ck.config).logits)
    assert logit_deviation(ck, q, sample) == 0.0


def test_zero_model_stays_zero_under_w8a8():
    cfg = ModelConfig(layers=1, heads=2, model_dim=8, ffn_dim=8, vocab_size=12, max_seq_len=16)
    ck = Checkpoint(cfg, zero_params(cfg))
    sample = _sample()
    q = quantize_model(ck, QuantSpec(8, 8), calibrate(ck, sample))
    assert np.all(q.logits(sample[0][None]) == 0)


@pytest.mark.parametrize("mode", ["formal", "practical"])
@pytest.mark.parametrize("alpha", [0.0, 0.5, 0.85, 1.0])
def test_migration_preserves_function(mode, alpha):
    ck = _model(mode=mode, std=0.5)
    sample = _sample()
    stats = calibrate(ck, sample)
    scales = migration_scales(ck.params, ck.config, stats, alpha)
    hooks = MigrationHooks(ck.config, scales)
    for s in sample:
        ref = forward_tokens(s[None], ck.params, ck.config).logits
        got = forward_tokens(s[None], ck.params, ck.config, hooks).logits
        assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_migration_balances_ranges_at_half():
    # at alpha 0.5 each migrated activation channel peaks where its weight column does
    ck = _model(std=0.5)
    stats = calibrate(ck, _sample())
    scales = migration_scales(ck.params, ck.config, stats, 0.5)
    hooks = MigrationHooks(ck.config, scales)
    consumers = {}
    for w, site in hooks.consumer.items():
        consumers.setdefault(site, []).append(w)
    for site, s in scales.items():
        act_peak = stats.sites[site].channel_absmax / s
        w_peak = np.max([np.max(np.abs(hooks.weight(w, ck.params[w])), axis=0) for w in consumers[site]], axis=0)
        assert np.allclose(act_peak, w_peak, rtol=1e-12)


@pytest.mark.parametrize("granularity", ["per_tensor", "per_channel"])
def test_quantised_forward_deviation_shrinks_with_bits(granularity):
    ck = _model(std=0.5)
    sample = _sample(6)
    stats = calibrate(ck, sample)
    dev = [logit_deviation(ck, quantize_model(ck, QuantSpec(b, b, granularity), stats), sample) for b in (4, 8)]
    assert dev[0] > dev[1] > 0


def test_asymmetric_and_smoothquant_run():
    ck = _model(std=0.5)
    sample = _sample()
    stats = calibrate(ck, sample)
    for spec in (QuantSpec(8, 8, symmetric=False), QuantSpec(8, 8, smoothquant_alpha=0.5),
                 QuantSpec(8, 8, "per_channel", smoothquant_alpha=0.5)):
        d = logit_deviation(ck, quantize_model(ck, spec, stats), sample)
        assert 0 < d < 0.5


def test_missing_stats():
    ck = _model()
    with pytest.raises(MissingStats):
        quantize_model(ck, QuantSpec(8, 8), CalibrationStats())
    q = quantize_model(ck, QuantSpec(8, 16), CalibrationStats())
    assert isinstance(q.hooks, Hooks)
