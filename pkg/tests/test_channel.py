import math

import numpy as np
import pytest

from tokencom.channel import (
    ChannelConfig, beam_gains, calibrate_channel_variance, compute_powers, compute_rates, compute_sinr,
    dbm_to_watt, matched_filter, sample_channels, watt_to_dbm,
)
from tokencom.errors import ConfigurationError

from conftest import random_instance, scalar_powers, scalar_rates, scalar_sinr


def test_unit_conversions():
    assert dbm_to_watt(30) == pytest.approx(1.0, rel=1e-15)
    assert dbm_to_watt(0) == pytest.approx(1e-3)
    assert watt_to_dbm(1.0) == pytest.approx(30.0)


@pytest.mark.parametrize("bad", [dict(num_antennas=0), dict(num_users=0), dict(num_rbs=0),
                                 dict(rb_bandwidth=0.0), dict(noise_psd=-1.0), dict(channel_variance=0.0),
                                 dict(bs_power=0.0), dict(num_users=2, user_gain_db=(0.0,))])
def test_config_invariants(bad):
    with pytest.raises(ConfigurationError):
        ChannelConfig(**bad)


def test_channel_second_moment_unit_variance():
    cfg = ChannelConfig(num_antennas=10, num_users=10, num_rbs=10, channel_variance=1.0)
    rng = np.random.default_rng(0)
    power = np.mean([np.mean(np.abs(sample_channels(cfg, rng)) ** 2) for _ in range(1000)])
    assert 0.995 <= power <= 1.005


def test_channel_second_moment_variance_four():
    cfg = ChannelConfig(num_antennas=10, num_users=10, num_rbs=10, channel_variance=4.0)
    rng = np.random.default_rng(1)
    h = np.concatenate([sample_channels(cfg, rng).ravel() for _ in range(1000)])
    assert np.mean(np.abs(h) ** 2) == pytest.approx(4.0, rel=0.01)
    # circular symmetry: real and imaginary parts each carry half the variance
    assert np.var(h.real) == pytest.approx(2.0, rel=0.02)
    assert np.var(h.imag) == pytest.approx(2.0, rel=0.02)


def test_sampling_is_deterministic():
    cfg = ChannelConfig(num_antennas=3, num_users=2, num_rbs=4)
    a = sample_channels(cfg, np.random.default_rng(5))
    b = sample_channels(cfg, np.random.default_rng(5))
    assert a.shape == (2, 4, 3)
    assert a.tobytes() == b.tobytes()


def test_user_gain_scales_variance():
    cfg = ChannelConfig(num_antennas=8, num_users=2, num_rbs=50, user_gain_db=(0.0, -10.0))
    rng = np.random.default_rng(2)
    h = np.stack([sample_channels(cfg, rng) for _ in range(200)])
    ratio = np.mean(np.abs(h[:, 1]) ** 2) / np.mean(np.abs(h[:, 0]) ** 2)
    assert ratio == pytest.approx(0.1, rel=0.03)


def scalar_oracle_error(cases=10_000, seed=3):
    """Worst relative deviation of the vectorised SINR/rate/power code from the loop oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        U, R, N = rng.integers(1, 4, size=3)
        cfg = ChannelConfig(num_antennas=N, num_users=U, num_rbs=R, rb_bandwidth=30e3,
                            noise_psd=10 ** rng.uniform(-3, 0))
        h, kappa, w = random_instance(rng, U, R, N)
        sinr = compute_sinr(h, kappa, w, cfg)
        per_rb, totals = compute_rates(sinr, kappa, cfg.rb_bandwidth)
        pu, pt = compute_powers(w, kappa)
        ref = np.array(scalar_sinr(h.tolist(), kappa.tolist(), w.tolist(), cfg.noise_power))
        ref_rb, ref_tot = scalar_rates(ref.tolist(), kappa.tolist(), cfg.rb_bandwidth)
        ref_pu, ref_pt = scalar_powers(w.tolist(), kappa.tolist())
        for got, want in ((sinr, ref), (per_rb, ref_rb), (totals, ref_tot), (pu, ref_pu), (pt, ref_pt)):
            got, want = np.asarray(got, float), np.asarray(want, float)
            scale = np.maximum(np.abs(want), 1e-300)
            worst = max(worst, float(np.max(np.abs(got - want) / scale, initial=0.0)))
    return worst


def test_matches_scalar_oracle_on_random_instances():
    assert scalar_oracle_error() < 1e-12


def test_hand_computed_single_user():
    # one user, one RB, one antenna: SINR = |h w|^2 / (B N0)
    cfg = ChannelConfig(num_antennas=1, num_users=1, num_rbs=1, rb_bandwidth=1.0, noise_psd=1.0)
    h = np.array([[[2.0 + 0j]]])
    w = np.array([[[1.5 + 0j]]])
    sinr = compute_sinr(h, np.ones((1, 1), int), w, cfg)
    assert sinr[0, 0] == 9.0
    _, total = compute_rates(sinr, np.ones((1, 1), int), 1.0)
    assert total[0] == math.log2(10.0)


def test_hand_computed_two_user_interference():
    # two users sharing one RB with unit-norm beams: SINR_0 = 1 / (0.25 + 1), SINR_1 = 4 / (1 + 1)
    cfg = ChannelConfig(num_antennas=2, num_users=2, num_rbs=1, rb_bandwidth=1.0, noise_psd=1.0)
    h = np.array([[[1.0, 0.0]], [[1.0, 1.0]]], complex)
    w = np.array([[[1.0, 0.0]], [[0.5, 0.0]]], complex)
    sinr = compute_sinr(h, np.ones((2, 1), int), w, cfg)
    assert sinr[0, 0] == 1.0 / (0.25 + 1.0)
    assert sinr[1, 0] == 0.25 / (1.0 + 1.0)
    _, totals = compute_rates(sinr, np.ones((2, 1), int), 30e3)
    assert totals[0] == 30e3 * math.log2(1.8)


def test_hand_computed_unassigned_user_gets_nothing():
    cfg = ChannelConfig(num_antennas=1, num_users=2, num_rbs=1, rb_bandwidth=1.0, noise_psd=1.0)
    h = np.ones((2, 1, 1), complex)
    w = np.array([[[1.0]], [[0.0]]], complex)
    kappa = np.array([[1], [0]])
    sinr = compute_sinr(h, kappa, w, cfg)
    assert sinr[1, 0] == 0.0
    assert sinr[0, 0] == 1.0
    per_rb, totals = compute_rates(sinr, kappa, 1.0)
    assert totals.tolist() == [1.0, 0.0]


def test_total_power_counts_every_cell():
    w = np.zeros((2, 2, 1), complex)
    w[0, 0, 0] = 1.0
    w[1, 1, 0] = 2.0
    per_user, total = compute_powers(w, np.array([[1, 0], [0, 0]]))
    assert per_user.tolist() == [1.0, 0.0]
    assert total == 5.0


def test_shape_mismatch_is_a_configuration_error():
    cfg = ChannelConfig(num_antennas=2, num_users=2, num_rbs=2)
    h = np.zeros((2, 2, 2), complex)
    with pytest.raises(ConfigurationError):
        compute_sinr(h, np.zeros((2, 3)), h, cfg)
    with pytest.raises(ConfigurationError):
        compute_sinr(h, np.zeros((2, 2)), np.zeros((2, 2, 3), complex), cfg)


def test_matched_filter_maximises_own_gain():
    rng = np.random.default_rng(4)
    h = rng.standard_normal((1, 1, 4)) + 1j * rng.standard_normal((1, 1, 4))
    w = matched_filter(h, np.array([[2.0]]))
    assert np.sum(np.abs(w) ** 2) == pytest.approx(2.0)
    g = beam_gains(h, w)[0, 0, 0]
    assert g == pytest.approx(2.0 * np.sum(np.abs(h) ** 2))
    for _ in range(100):
        v = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        v *= np.sqrt(2.0) / np.linalg.norm(v)
        assert beam_gains(h, v.reshape(1, 1, 4))[0, 0, 0] <= g * (1 + 1e-12)


def test_calibration_hits_target_rate():
    cfg = ChannelConfig(num_antennas=4, num_users=2, num_rbs=4)
    target = 1.2e6
    var = calibrate_channel_variance(cfg, target)
    snr = (cfg.bs_power / cfg.num_rbs) * cfg.num_antennas * var / cfg.noise_power
    assert cfg.num_rbs * cfg.rb_bandwidth * math.log2(1 + snr) == pytest.approx(target, rel=1e-12)
