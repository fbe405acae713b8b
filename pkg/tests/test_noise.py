import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rydberg_lz.calibration import REFERENCE_LINEAR_G0, ConversionModel
from rydberg_lz.dataset import ShotData
from rydberg_lz.noise import (
    NoiseModel,
    SignalBin,
    bin_by_total,
    delta_g,
    fit_polya,
    group_bins,
    iterative_fit,
    phi,
    phi_partials,
    polya_snr,
)
from rydberg_lz.simulator import SimConfig, generate_dataset

G0 = REFERENCE_LINEAR_G0
LINEAR = ConversionModel.linear(G0)


def test_polya_snr_examples():
    n = NoiseModel(6.4, 0.072)
    assert polya_snr(n, 10.0) == pytest.approx(64.0 / math.sqrt(17.2), rel=1e-15)
    assert polya_snr(n, 10.0) == pytest.approx(15.431770309453189, rel=1e-14)
    assert polya_snr(NoiseModel(6.4, 0.0), 25.0) == pytest.approx(32.0, rel=1e-15)
    assert polya_snr(n, 1e12) == pytest.approx(6.4 / math.sqrt(0.072), rel=1e-9)
    with pytest.raises(ValueError):
        polya_snr(n, 0.0)


def test_noise_model_validation_and_gamma_max():
    n = NoiseModel(6.4, 0.072)
    assert n.gamma_max == pytest.approx(math.sqrt(0.072) / 6.4)
    assert 0.03 <= n.gamma_max <= 0.05
    assert n.relative_variance(10.0) == pytest.approx(1.0 / polya_snr(n, 10.0) ** 2)
    with pytest.raises(ValueError):
        NoiseModel(0.0, 0.1)
    with pytest.raises(ValueError):
        NoiseModel(1.0, -0.1)


def test_noise_model_has_only_combined_broadening():
    # β and Γ enter only through β_eff; neither is separately identifiable.
    assert [f.name for f in dataclasses.fields(NoiseModel)] == ["alpha", "beta_eff"]


@given(st.floats(1.0, 30.0), st.floats(0.0, 0.5))
@settings(max_examples=30, deadline=None)
def test_fit_polya_recovers_exact_points(alpha, beta):
    s = np.geomspace(0.05, 50.0, 30)
    m = fit_polya(s, polya_snr(NoiseModel(alpha, beta), s))
    assert m.alpha == pytest.approx(alpha, rel=1e-6)
    assert m.beta_eff == pytest.approx(beta, rel=1e-5, abs=1e-8)


def test_fit_polya_clips_negative_broadening():
    s = np.geomspace(0.1, 10.0, 20)
    y = 5.0 * np.sqrt(s) * (1 + 0.05 * np.log(s))  # grows faster than sqrt(S)
    m = fit_polya(s, y)
    assert m.beta_eff == 0.0


def _const_data(n=40, fp=2.0):
    return ShotData(np.arange(n), np.full(n, fp), np.full(n, 0.3), np.full(n, 9.7))


def test_bins_of_constant_data_have_zero_spread():
    bins = bin_by_total(_const_data(), 4)
    assert len(bins) == 4 and sum(b.count for b in bins) == 40
    assert all(b.s_total_std < 1e-12 and b.s_np_std < 1e-12 for b in bins)
    assert bins[0].s_r_mean == pytest.approx(9.7)


def test_bin_count_limits():
    with pytest.raises(ValueError):
        bin_by_total(_const_data(10), 6)
    with pytest.raises(ValueError):
        bin_by_total(_const_data(10), 1)


def test_group_bins_splits_by_slew_rate_and_trims():
    d = _const_data(40, 1.0)
    d2 = _const_data(40, 3.0)
    both = ShotData(np.arange(80), np.concatenate([d.f_prime, d2.f_prime]),
                    np.concatenate([d.s_np, d2.s_np]), np.concatenate([d.s_r, d2.s_r]))
    assert len(group_bins(both, 10)) == 16
    assert len(group_bins(both, 10, trim_edges=False)) == 20


def _consistent_point(fp=2.0, s_t=10.0):
    data, _ = generate_dataset(SimConfig(n_shots=1, mode="expected", noise=None, sweep_grid=(fp,),
                                         density_jitter_rel=0.0, mean_density=g_from(s_t)))
    return data.s_np[0], data.s_r[0]


def g_from(s_t):
    return G0 * s_t * 1e-9


def test_phi_vanishes_on_noiseless_shots_and_changes_sign():
    s_np, s_r = _consistent_point()
    assert abs(phi(s_np, s_r, G0, G0, 2.0)) < 1e-12 * s_np
    assert phi(s_np * 1.1, s_r, G0, G0, 2.0) > 0
    assert phi(s_np * 0.9, s_r, G0, G0, 2.0) < 0
    with pytest.raises(ValueError):
        phi(s_np, s_r, 0.0, G0, 2.0)


def _bin(s_np, s_r, sd_np, sd_t, fp=2.0):
    return SignalBin(fp, s_np + s_r, sd_t, s_np, sd_np, 100)


def test_delta_g_zero_when_scatter_is_fully_explained():
    s_np, s_r = _consistent_point()
    b0 = _bin(s_np, s_r, 0.0, 0.3)
    d = phi_partials(b0, G0)
    # S^np scatter exactly what the S^T scatter propagates into: radicand 0.
    b = _bin(s_np, s_r, abs(d.d_st / d.d_snp) * 0.3 * (1 + 1e-12), 0.3)
    assert delta_g([b], 0.07, "np", LINEAR)[0] == pytest.approx(0.0, abs=1e-6 * G0)


def test_delta_g_scales_linearly_with_scatter():
    s_np, s_r = _consistent_point()
    b1 = _bin(s_np, s_r, 0.2, 0.2)
    b2 = _bin(s_np, s_r, 0.4, 0.4)
    for which in ("np", "R"):
        d1, d2 = delta_g([b1, b2], 0.07, which, LINEAR)
        assert d2 == pytest.approx(2.0 * d1, rel=1e-9)


def test_delta_g_polya_ratio_between_gates():
    s_np, s_r = _consistent_point()
    b = _bin(s_np, s_r, 0.2, 0.2)
    beta = 0.07
    d_np = delta_g([b], beta, "np", LINEAR)[0]
    d_r = delta_g([b], beta, "R", LINEAR)[0]
    assert (d_np / d_r) ** 2 == pytest.approx((beta + 1 / s_np) / (beta + 1 / s_r), rel=1e-12)


def test_delta_g_unresolvable_bins_are_nan():
    s_np, s_r = _consistent_point()
    b = _bin(s_np, s_r, 0.0, 0.3)
    assert math.isnan(delta_g([b], 0.0, "R", LINEAR)[0])
    with pytest.raises(ValueError):
        delta_g([b], 0.0, "total", LINEAR)
    with pytest.raises(ValueError):
        delta_g([b], 0.0, "np", ConversionModel.quadratic(G0, 1e22))


def test_iterative_fit_flags_degenerate_data():
    res = iterative_fit(_const_data(400), LINEAR, bins_per_group=10)
    assert res.degenerate and not res.converged
    assert res.to_dict()["degenerate"] is True


def test_iterative_fit_converges_on_moderate_dataset():
    cfg = SimConfig(n_shots=16000, seed=21)
    data, _ = generate_dataset(cfg)
    res = iterative_fit(data, LINEAR, bins_per_group=30)
    assert res.converged and not res.degenerate
    assert res.model.alpha == pytest.approx(6.4, rel=0.15)
    assert res.trace[0][1] <= res.trace[-1][1] or len(res.trace) == 1
    assert res.to_dict()["model"]["alpha_per_sqrt_nVs"] == res.model.alpha
