import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from photophys.errors import DegenerateMean, EmptySelection, OutOfBounds
from photophys.plmap import (
    EmitterRecord,
    Grid,
    PLMap,
    PSFModel,
    aggregate_stats,
    bin_timetrace,
    detect_emitters,
    expected_map,
    integrate_spot,
    normalize_map_set,
    read_map,
    read_records_csv,
    render_plmap,
    stability_metric,
    write_map_csv,
    write_raster,
    write_records_csv,
)
from photophys.sim import single_fraction_among_occupied

PSF = PSFModel(0.4)


def array_positions(n=63, cols=9, spacing=3.0, seed=0):
    rng = np.random.default_rng(seed)
    xy = [(2 + (k % cols) * spacing, 2 + (k // cols) * spacing) for k in range(n)]
    return [(x + rng.normal(0, 0.3), y + rng.normal(0, 0.3)) for x, y in xy]


def test_render_empty_map_is_zero():
    m = render_plmap([], PSF, Grid(50, 40, 0.1), 1.0, 0)
    assert m.pixels.shape == (40, 50)
    assert not m.pixels.any()


def test_render_total_counts_single_emitter():
    g = Grid(100, 100, 0.1)
    m = render_plmap([((5.0, 5.0), 2e4)], PSF, g, 1.0, 1)
    mu = 2e4
    assert abs(m.pixels.sum() - mu) <= 5 * math.sqrt(mu)


def test_render_two_resolvable_emitters():
    g = Grid(80, 40, 0.1)
    m = render_plmap([((2.5, 2.0), 5e4), ((5.5, 2.0), 5e4)], PSF, g, 1.0, 2)
    d = detect_emitters(m, 5, PSF)
    assert len(d) == 2
    assert sorted(round(x.x_um) for x in d) == [2, 6] or sorted(round(x.x_um, 0) for x in d) == [2.0, 6.0]


def test_render_seed_deterministic_and_linear_in_exposure():
    g = Grid(60, 60, 0.1)
    em = [((3.0, 3.0), 1e4)]
    assert np.array_equal(render_plmap(em, PSF, g, 1.0, 7).pixels, render_plmap(em, PSF, g, 1.0, 7).pixels)
    n1 = render_plmap(em, PSF, g, 1.0, 8).pixels.sum()
    n3 = render_plmap(em, PSF, g, 3.0, 9).pixels.sum()
    ratio = n3 / n1
    err = ratio * math.sqrt(1 / n1 + 1 / n3)
    assert abs(ratio - 3.0) <= 5 * err
    np.testing.assert_allclose(expected_map(em, PSF, g, 3.0), 3 * expected_map(em, PSF, g, 1.0))


def test_render_rejects_emitter_outside_grid():
    with pytest.raises(OutOfBounds):
        render_plmap([((50.0, 1.0), 1.0)], PSF, Grid(10, 10, 0.1), 1.0, 0)


def test_detect_63_emitter_array():
    pos = array_positions()
    g = Grid.covering(pos, 0.1, 3.0)
    m = render_plmap([(p, 1.4e4) for p in pos], PSF, g, 1.0, 3, background_per_pixel=5)
    dets = detect_emitters(m, 5, PSF)
    assert len(dets) == 63
    for x, y in pos:
        err = min(math.hypot(d.x_um - x, d.y_um - y) for d in dets)
        assert err <= PSF.fwhm_um / 2
    peaks = [d.peak for d in dets]
    assert peaks == sorted(peaks, reverse=True)


def test_flat_noise_map_gives_no_detections():
    g = Grid(100, 100, 0.1)
    clean = sum(len(detect_emitters(render_plmap([], PSF, g, 1.0, s, background_per_pixel=20), 5, PSF)) == 0
                for s in range(100))
    assert clean >= 99


def test_hot_pixel_rejected():
    g = Grid(60, 60, 0.1)
    m = render_plmap([((2.0, 2.0), 2e4)], PSF, g, 1.0, 4, background_per_pixel=10)
    px = m.pixels.copy()
    px[45, 45] = 5000
    dets = detect_emitters(PLMap(px, 0.1), 5, PSF)
    assert len(dets) == 1
    assert abs(dets[0].x_um - 2.0) < 0.1


def test_integrate_isolated_emitter_recovers_99_percent():
    g = Grid(100, 100, 0.1)
    em = [((5.03, 4.97), 1e5)]
    m = PLMap(expected_map(em, PSF, g, 1.0), 0.1)
    spot = integrate_spot(m, (5.03, 4.97), 3 * PSF.fwhm_um)
    assert spot.counts >= 0.99 * 1e5
    assert not spot.blended


def test_integrate_empty_region_is_noise():
    g = Grid(100, 100, 0.1)
    m = render_plmap([], PSF, g, 1.0, 5, background_per_pixel=20)
    spot = integrate_spot(m, (5.0, 5.0), 1.2)
    assert abs(spot.counts) <= 5 * math.sqrt(20 * spot.n_pixels)


def test_integrate_flags_blended_pair():
    g = Grid(100, 100, 0.1)
    m = render_plmap([((5.0, 5.0), 3e4), ((5.55, 5.0), 3e4)], PSF, g, 1.0, 6, background_per_pixel=5)
    dets = detect_emitters(m, 5, PSF)
    assert len(dets) == 2
    spot = integrate_spot(m, (dets[0].x_um, dets[0].y_um), 1.2, dets)
    assert spot.blended


def test_integrate_out_of_bounds():
    m = PLMap(np.zeros((10, 10)), 0.1)
    with pytest.raises(OutOfBounds):
        integrate_spot(m, (0.05, 0.5), 0.5)


def test_closed_loop_brightness_within_ten_percent():
    rng = np.random.default_rng(11)
    pos = array_positions(20, 5, seed=1)
    rates = rng.uniform(1e4, 5e4, len(pos))
    g = Grid.covering(pos, 0.1, 3.0)
    m = render_plmap(list(zip(pos, rates)), PSF, g, 1.0, 12, background_per_pixel=5)
    dets = detect_emitters(m, 5, PSF)
    assert len(dets) == len(pos)
    for (x, y), r in zip(pos, rates):
        d = min(dets, key=lambda d: math.hypot(d.x_um - x, d.y_um - y))
        spot = integrate_spot(m, (d.x_um, d.y_um), 1.2, dets)
        assert abs(spot.counts / r - 1) < 0.10


def test_map_invariants():
    with pytest.raises(ValueError):
        PLMap(np.array([[1.0, -1.0]]), 0.1)
    with pytest.raises(ValueError):
        PLMap(np.zeros((2, 2)), 0.0)
    with pytest.raises(ValueError):
        PSFModel(0.0)


def test_normalize_map_set_to_reference_max():
    a = PLMap(np.array([[1.0, 4.0]]), 0.1, excitation_wavelength_nm=375)
    b = PLMap(np.array([[2.0, 2.0]]), 0.1, excitation_wavelength_nm=530)
    out = normalize_map_set({375: a, 530: b}, 375)
    assert out[375].pixels.max() == 1.0
    np.testing.assert_allclose(out[530].pixels, [[0.5, 0.5]])
    assert out[530].normalization == 4.0


def test_raster_and_csv_roundtrip(tmp_path):
    m = PLMap(np.arange(12.0).reshape(3, 4), 0.2, (1.0, -2.0), 530.0)
    write_raster(tmp_path / "m.f32", m)
    write_map_csv(tmp_path / "m.csv", m)
    for p in ("m.f32", "m.csv"):
        back = read_map(tmp_path / p)
        np.testing.assert_array_equal(back.pixels, m.pixels)
        assert back.pixel_size_um == 0.2 and back.origin_um == (1.0, -2.0)
        assert back.excitation_wavelength_nm == 530.0


# --- ensemble statistics -----------------------------------------------------


def test_stats_lifetime_sampling_bounds():
    rng = np.random.default_rng(63)
    recs = [EmitterRecord((0, 0), g2_zero=0.3, lifetime_ns=v) for v in rng.normal(3.8, 0.5, 63)]
    st_ = aggregate_stats(recs, "lifetime_ns")
    assert abs(st_.mean - 3.8) <= 0.2
    assert abs(st_.std - 0.5) <= 0.15
    assert sum(st_.counts) == st_.n == 63


def test_stats_single_record():
    st_ = aggregate_stats([EmitterRecord((0, 0), brightness_hz=5.0)], "brightness_hz")
    assert st_.std == 0.0 and st_.n == 1


def test_stats_hand_arithmetic():
    st_ = aggregate_stats([EmitterRecord((0, 0), fwhm_nm=2.0), EmitterRecord((0, 0), fwhm_nm=4.0)], "fwhm_nm")
    assert st_.mean == 3.0
    assert st_.std == pytest.approx(math.sqrt(2), rel=1e-15)


def test_stats_lifetime_filter_on_g2():
    recs = [EmitterRecord((0, 0), g2_zero=0.2, lifetime_ns=3.0), EmitterRecord((0, 0), g2_zero=0.5, lifetime_ns=4.0),
            EmitterRecord((0, 0), g2_zero=0.8, lifetime_ns=9.0), EmitterRecord((0, 0), lifetime_ns=9.0)]
    st_ = aggregate_stats(recs, "lifetime_ns")
    assert st_.n == 2 and st_.mean == 3.5
    with pytest.raises(EmptySelection):
        aggregate_stats(recs[2:], "lifetime_ns")
    with pytest.raises(EmptySelection):
        aggregate_stats([], "g2_zero")


@given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.integers(1, 12))
def test_stats_histogram_accounts_for_every_record(vals, nbins):
    recs = [EmitterRecord((0, 0), g2_zero=v) for v in vals]
    st_ = aggregate_stats(recs, "g2_zero", np.linspace(0, 10, nbins + 1))
    assert sum(st_.counts) == st_.n == len(vals)
    assert st_.std >= 0


def test_stats_value_outside_edges_raises():
    with pytest.raises(ValueError):
        aggregate_stats([EmitterRecord((0, 0), g2_zero=3.0)], "g2_zero", [0, 1, 2])


def test_record_invariants():
    with pytest.raises(ValueError):
        EmitterRecord((0, 0), brightness_hz=-1)
    with pytest.raises(ValueError):
        EmitterRecord((0, 0), lifetime_ns=0)


def test_records_csv_roundtrip(tmp_path):
    recs = [EmitterRecord((1.5, 2.5), 0.3, 3.8, 14000.0, 574.8, 19.6), EmitterRecord((0.0, 1.0), g2_zero=1.2)]
    write_records_csv(tmp_path / "r.csv", recs)
    assert read_records_csv(tmp_path / "r.csv") == recs


def test_stability_examples():
    assert stability_metric([12900.0] * 60)[2] == 0.0
    mean, std, rel = stability_metric([12900 - 600, 12900 + 600] * 30)
    # sample std of +-600 alternating over 60 bins is 600*sqrt(60/59)
    assert mean == 12900 and std == pytest.approx(600 * math.sqrt(60 / 59))
    with pytest.raises(DegenerateMean):
        stability_metric([0, 0, 0])
    with pytest.raises(ValueError):
        stability_metric([5])


def test_stability_poisson_shot_noise_limit():
    r = 12_900
    counts = np.random.default_rng(14).poisson(r, 2000)
    assert stability_metric(counts)[2] == pytest.approx(100 / math.sqrt(r), rel=0.05)


def test_bin_timetrace():
    t = np.array([0, 10**12 - 1, 10**12, 3 * 10**12 - 1, 3 * 10**12 + 5])
    np.testing.assert_array_equal(bin_timetrace(t, 3 * 10**12 + 500, 1.0), [2, 1, 1])


def test_single_fraction_closed_loop_with_poisson_counts():
    # Poisson-yield closed loop: fraction of occupied spots with exactly one emitter
    from photophys.sim import sample_emitter_count

    for lam in (0.5, 1.0, 2.0):
        n = np.array([sample_emitter_count(lam, 1000 * i + 7) for i in range(20_000)])
        occ = n[n > 0]
        p = single_fraction_among_occupied(lam)
        assert abs((occ == 1).mean() - p) <= 5 * math.sqrt(p * (1 - p) / occ.size)
