import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from photophys.correlate import DecayHistogram, decay_histogram
from photophys.errors import EmptyData, NoPeak, Underdetermined
from photophys.fit import (
    FWHM_PER_SIGMA,
    SaturationParams,
    convolved_decay_model,
    fit_gaussian_peak,
    fit_lifetime,
    fit_saturation,
    gaussian_model,
    saturation_model,
    tail_decay_model,
)
from photophys.sim import AcquisitionConfig, EmitterModel, simulate_stream
from photophys.spectro import Spectrum

I_SAT, P_SAT = 46_880.0, 114.0
POWERS = np.array([5, 10, 20, 35, 60, 90, 114, 150, 220, 350, 600, 1000], float)


def central_diff(model, theta, h_rel=1e-6):
    theta = np.asarray(theta, float)
    cols = []
    for k in range(theta.size):
        h = h_rel * max(abs(theta[k]), 1.0)
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        cols.append((model(tp)[0] - model(tm)[0]) / (2 * h))
    return np.column_stack(cols)


def assert_jacobian(model, theta):
    _, J = model(np.asarray(theta, float))
    num = central_diff(model, theta)
    scale = np.abs(J).max(axis=0)
    np.testing.assert_allclose(J, num, rtol=1e-4, atol=1e-9 * scale.max())
    # and column-wise relative to the column magnitude
    assert np.all(np.abs(J - num).max(axis=0) <= 1e-4 * scale)


def test_saturation_jacobian():
    assert_jacobian(lambda th: saturation_model(th, POWERS), [I_SAT, P_SAT, 150.0])


@pytest.mark.parametrize("sigma", [0.0, 100.0, 400.0])
def test_convolved_decay_jacobian(sigma):
    edges = np.arange(0, 50_001, 256, dtype=float)
    t0 = 5000.3 if sigma else 4990.0  # keep the sigma=0 kink off the bin edges
    assert_jacobian(lambda th: convolved_decay_model(th, edges[:-1], edges[1:], sigma), [3830.0, 1e6, t0, 2.0])


def test_tail_decay_jacobian():
    edges = np.arange(6000, 50_001, 256, dtype=float)
    assert_jacobian(lambda th: tail_decay_model(th, edges[:-1], edges[1:], 6000.0), [3830.0, 1e6, 2.0])


def test_gaussian_jacobian():
    x = np.linspace(540, 620, 200)
    assert_jacobian(lambda th: gaussian_model(th, x), [575.0, 19.56, 2000.0, 20.0])


# --- saturation ---------------------------------------------------------------


def test_saturation_exact_curve_six_digits():
    truth = SaturationParams(I_SAT, P_SAT, 0.0)
    fr = fit_saturation(np.column_stack([POWERS, truth.rate(POWERS)]))
    assert fr.converged
    assert fr["i_sat_hz"] == pytest.approx(I_SAT, rel=1e-6)
    assert fr["p_sat_uw"] == pytest.approx(P_SAT, rel=1e-6)
    assert abs(fr["i_dark_hz"]) < 1e-6 * I_SAT


def test_saturation_flat_data():
    fr = fit_saturation(np.column_stack([POWERS, np.full(POWERS.size, 321.0)]))
    assert fr["i_sat_hz"] == 0.0
    assert fr["i_dark_hz"] == 321.0


def test_saturation_underdetermined():
    with pytest.raises(Underdetermined):
        fit_saturation([(1, 10), (2, 20), (2, 21)])


def test_saturation_coverage_over_100_seeds():
    truth = np.array([I_SAT, P_SAT, 150.0])
    clean = SaturationParams(*truth).rate(POWERS)
    sd = 0.05 * clean
    hits = 0
    for seed in range(100):
        y = clean + np.random.default_rng(seed).normal(0.0, sd)
        fr = fit_saturation(np.column_stack([POWERS, y]), weights=1 / sd**2)
        est = np.array([fr["i_sat_hz"], fr["p_sat_uw"], fr["i_dark_hz"]])
        err = np.array([fr.sigmas[k] for k in ("i_sat_hz", "p_sat_uw", "i_dark_hz")])
        hits += bool(np.all(np.abs(est - truth) <= 3 * err))
    assert hits >= 95


def test_saturation_reorder_invariant(rng):
    y = SaturationParams(I_SAT, P_SAT, 150).rate(POWERS) * (1 + 0.03 * rng.standard_normal(POWERS.size))
    pts = np.column_stack([POWERS, y])
    a = fit_saturation(pts)
    b = fit_saturation(pts[rng.permutation(len(pts))])
    for k in a.params:
        assert b[k] == pytest.approx(a[k], rel=1e-7, abs=1e-6)


@given(st.floats(1e3, 1e6), st.floats(1.0, 1e3), st.floats(0.0, 1e3))
def test_saturation_half_rise_identity(i_sat, p_sat, i_d):
    sp = SaturationParams(i_sat, p_sat, i_d)
    assert sp.rate(p_sat) - i_d == pytest.approx(i_sat / 2, rel=1e-12)


def test_saturation_fit_obeys_half_rise(rng):
    y = SaturationParams(I_SAT, P_SAT, 150).rate(POWERS) * (1 + 0.05 * rng.standard_normal(POWERS.size))
    sp = SaturationParams.from_fit(fit_saturation(np.column_stack([POWERS, y])))
    assert sp.rate(sp.p_sat_uw) - sp.i_dark_hz == pytest.approx(sp.i_sat_hz / 2, rel=1e-12)


def test_fit_reports_small_gradient_at_optimum(rng):
    y = SaturationParams(I_SAT, P_SAT, 150).rate(POWERS) * (1 + 0.05 * rng.standard_normal(POWERS.size))
    fr = fit_saturation(np.column_stack([POWERS, y]))
    assert fr.converged and fr.gradient_cosine < 1e-6
    assert all(v >= 0 for v in fr.sigmas.values())


# --- lifetime ----------------------------------------------------------------------


def _exact_decay(tau_ps, sigma, amp=1e6, t0=5000.0, base=2.0, w=256):
    edges = np.arange(0, 50_000 // w * w + 1, w, dtype=float)
    f, _ = convolved_decay_model([tau_ps, amp, t0, base], edges[:-1], edges[1:], sigma)
    return DecayHistogram(edges, f)


def test_lifetime_exact_convolved_model():
    fr = fit_lifetime(_exact_decay(3830.0, 100.0), 100.0)
    assert fr.converged
    assert abs(fr["tau_ns"] / 3.83 - 1) < 0.005


def test_lifetime_sigma_zero_matches_pure_exponential():
    h = _exact_decay(3830.0, 0.0, t0=4992.0, base=0.5)
    conv = fit_lifetime(h, 0.0, "convolved")
    tail = fit_lifetime(h, 0.0, "tail")
    assert conv["tau_ns"] == pytest.approx(3.83, rel=1e-6)
    assert conv["tau_ns"] == pytest.approx(tail["tau_ns"], rel=1e-6)
    # the convolved model is continuous as sigma -> 0
    edges = h.edges_ps
    f0, _ = convolved_decay_model([3830.0, 1e6, 4992.0, 0.5], edges[:-1], edges[1:], 0.0)
    f1, _ = convolved_decay_model([3830.0, 1e6, 4992.0, 0.5], edges[:-1], edges[1:], 1e-6)
    np.testing.assert_allclose(f1, f0, rtol=1e-6, atol=1e-6)


def test_lifetime_simulated_vs_mean_delay_oracle():
    m = EmitterModel.from_saturation(I_SAT, P_SAT, 3.83)
    cfg = AcquisitionConfig(power_uw=1140, duration_s=23.5, irf_sigma_ps=100, seed=21)
    s = simulate_stream([m], cfg)
    assert len(s) >= 10**6
    oracle = (((s.t + 5000) % cfg.rep_period_ps) - 5000).mean() / 1e3
    fr = fit_lifetime(decay_histogram(s, 256), 100.0)
    assert fr.converged
    assert abs(fr["tau_ns"] / oracle - 1) < 0.01


def test_lifetime_empty_histogram():
    with pytest.raises(EmptyData):
        fit_lifetime(DecayHistogram(np.arange(0, 2561, 256), np.zeros(10)), 100.0)


def test_lifetime_too_few_bins():
    c = np.zeros(100)
    c[50] = 1000
    with pytest.raises(Underdetermined):
        fit_lifetime(DecayHistogram(np.arange(0, 25_601, 256), c))


def test_lifetime_bad_mode():
    with pytest.raises(ValueError):
        fit_lifetime(_exact_decay(3830.0, 100.0), 100.0, mode="deconvolved")


def test_lifetime_reorder_invariance_of_bins():
    # the Poisson-weighted objective is a sum over bins: permuting bins changes nothing
    h = _exact_decay(3830.0, 100.0)
    noisy = np.random.default_rng(3).poisson(h.counts)
    a = fit_lifetime(DecayHistogram(h.edges_ps, noisy), 100.0)
    assert a.converged and a.gradient_cosine < 1e-6


# --- Gaussian peak -------------------------------------------------------------------


def _gauss(x, c=575.0, fwhm=19.56, amp=2000.0, base=20.0):
    return amp * np.exp(-0.5 * ((x - c) / (fwhm / FWHM_PER_SIGMA)) ** 2) + base


def test_gaussian_exact_four_digits():
    x = np.arange(520, 640.01, 0.25)
    fr = fit_gaussian_peak(Spectrum(x, _gauss(x), "nm"))
    assert fr["center_nm"] == pytest.approx(575.0, rel=1e-4)
    assert fr["fwhm_nm"] == pytest.approx(19.56, rel=1e-4)
    assert fr.derived["sigma_nm"] == pytest.approx(19.56 / FWHM_PER_SIGMA, rel=1e-4)


def test_gaussian_symmetric_data_center_on_axis():
    x = np.linspace(560, 590, 61)
    y = np.exp(-np.abs(x - 575.0) / 4)  # not Gaussian, but symmetric about 575
    fr = fit_gaussian_peak(Spectrum(x, y, "nm"))
    assert fr["center_nm"] == pytest.approx(575.0, abs=1e-9)


def test_gaussian_truncated_left_tail(rng):
    x = np.arange(550, 650.01, 0.25)
    y = rng.poisson(_gauss(x, c=574.83)).astype(float)
    fr = fit_gaussian_peak(Spectrum(x, y, "nm"))
    assert abs(fr["center_nm"] - 574.83) < 0.5


def test_gaussian_energy_axis_names():
    x = np.linspace(2.0, 2.3, 300)
    y = _gauss(x, c=2.156, fwhm=0.07)
    fr = fit_gaussian_peak(Spectrum(x, y, "ev"))
    assert fr["center_ev"] == pytest.approx(2.156, rel=1e-8)


def test_gaussian_reorder_invariant(rng):
    x = np.arange(550, 650.01, 0.5)
    y = rng.poisson(_gauss(x)).astype(float)
    a = fit_gaussian_peak(Spectrum(x, y, "nm"))
    b = fit_gaussian_peak(Spectrum(x[::-1], y[::-1], "nm"))
    for k in a.params:
        assert b[k] == pytest.approx(a[k], rel=1e-9)


def test_gaussian_no_peak():
    x = np.linspace(550, 650, 50)
    with pytest.raises(NoPeak):
        fit_gaussian_peak(Spectrum(x, x - 500, "nm"))


def test_fit_result_json_safe():
    fr = fit_saturation(np.column_stack([POWERS, np.full(POWERS.size, 5.0)]))
    d = fr.to_dict()
    assert d["sigmas"]["p_sat_uw"] is None
    assert math.isfinite(d["params"]["i_dark_hz"])
