import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2sae import channel as ch
from c2sae import ranging
from c2sae.ranging import PathEstimate, extract_paths, ranging_error

DT = 5e-9
C = ch.SPEED_OF_LIGHT


def test_two_peaks_read_off():
    p = np.zeros(1023)
    p[10], p[50] = 1.0, 0.25
    est = extract_paths(p, DT, threshold_db=-20)
    assert [e.delay for e in est] == [10 * DT, 50 * DT]
    assert [e.power for e in est] == [1.0, 0.25]


def test_single_peak_range_bin():
    p = np.full(1023, 1e-6)
    p[1] = 1.0
    est = extract_paths(p, DT, threshold_db=-20)
    assert len(est) == 1
    assert est[0].range == pytest.approx(C / 200e6)
    assert est[0].range == pytest.approx(1.50, abs=0.01)


def test_threshold_drops_weak_peaks():
    p = np.zeros(64)
    p[5], p[30] = 1.0, 1e-3
    assert len(extract_paths(p, DT, threshold_db=-20)) == 1
    assert len(extract_paths(p, DT, threshold_db=-40)) == 2


def test_all_zero_is_empty():
    assert extract_paths(np.zeros(1023), DT) == []


def test_threshold_must_be_negative():
    with pytest.raises(ValueError):
        extract_paths(np.ones(8), DT, threshold_db=0.0)


def test_plateau_counts_once():
    p = np.zeros(32)
    p[10:13] = 1.0
    assert len(extract_paths(p, DT, -20, min_separation_bins=1)) == 1


def test_three_path_true_dps_delays():
    cfg = ch.SoundingConfig()
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = ch.sample_separated_paths(rng, cfg, n_paths=3, min_separation_bins=3)
        est = extract_paths(np.abs(ch.ideal_taps(p, cfg)) ** 2, DT, threshold_db=-25)
        res = ranging_error(p, est)
        assert res.n_missed == 0
        assert np.all(res.delay_error <= DT)


def test_three_path_true_dps_powers_on_grid():
    # peak-bin power equals |gain|^2 only when the delay sits on a bin
    cfg = ch.SoundingConfig()
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = ch.sample_separated_paths(rng, cfg, n_paths=3, min_separation_bins=3)
        p = ch.PathSet.from_arrays(np.round(p.delays / DT) * DT, p.gains)
        est = extract_paths(np.abs(ch.ideal_taps(p, cfg)) ** 2, DT, threshold_db=-25)
        res = ranging_error(p, est)
        assert res.n_missed == 0
        for i, j in enumerate(res.matched):
            assert est[j].power == pytest.approx(abs(p.gains[i]) ** 2, rel=0.2)


def test_separated_paths_generator():
    rng = np.random.default_rng(1)
    for n in (1, 2, 4):
        p = ch.sample_separated_paths(rng, n_paths=n, min_separation_bins=3)
        bins = p.delays / DT
        assert len(p) == n and np.all(np.diff(bins) >= 3)
        db = 20 * np.log10(np.abs(p.gains))
        assert np.all((db >= -10) & (db <= 0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=256), st.integers(1, 6))
def test_output_sorted_and_separated(values, sep):
    est = extract_paths(np.array(values), DT, threshold_db=-30, min_separation_bins=sep)
    d = np.array([e.delay for e in est]) / DT
    assert np.all(np.diff(d) > 0)
    assert np.all(np.diff(d) >= sep - 1e-9)


def test_interpolation_recovers_fraction():
    cfg = ch.SoundingConfig()
    p = ch.PathSet.from_arrays(np.array([100.3]) * DT, np.array([1.0]))
    power = np.abs(ch.ideal_taps(p, cfg)) ** 2
    coarse = extract_paths(power, DT)[0].delay / DT
    fine = extract_paths(power, DT, interpolate=True)[0].delay / DT
    assert coarse == 100
    assert abs(fine - 100.3) < abs(coarse - 100.3)


def test_path_estimate_invariants():
    assert PathEstimate(2e-9, 0.5).range == pytest.approx(C * 2e-9)
    with pytest.raises(ValueError):
        PathEstimate(-1e-9, 1.0)
    with pytest.raises(ValueError):
        PathEstimate(1e-9, 0.0)


# --- ranging_error --------------------------------------------------------


def _truth():
    return ch.PathSet.from_arrays(np.array([10, 40, 90]) * DT, np.array([1.0, 0.5, 0.2]))


def test_exact_estimates_zero_error():
    t = _truth()
    est = [PathEstimate(d, abs(g) ** 2) for d, g in zip(t.delays, t.gains)]
    res = ranging_error(t, est)
    assert np.all(res.delay_error == 0) and res.n_missed == 0


def test_no_estimates_all_missed():
    res = ranging_error(_truth(), [])
    assert res.misses == [0, 1, 2]
    assert np.all(np.isnan(res.range_error))


def test_one_bin_shift_is_one_range_bin():
    t = _truth()
    est = [PathEstimate(d + DT, 1.0) for d in t.delays]
    res = ranging_error(t, est)
    np.testing.assert_allclose(res.range_error, C / 200e6)
    assert res.range_error[0] == pytest.approx(1.499, abs=1e-3)


def test_max_error_turns_far_matches_into_misses():
    t = _truth()
    res = ranging_error(t, [PathEstimate(10 * DT, 1.0), PathEstimate(60 * DT, 1.0)], max_error=3 * DT)
    assert res.matched[0] == 0 and res.misses == [1, 2]


def test_empty_truth_rejected():
    with pytest.raises(ValueError):
        ranging_error(ch.PathSet(()), [])


def test_each_estimate_used_once():
    t = _truth()
    res = ranging_error(t, [PathEstimate(11 * DT, 1.0)])
    assert res.matched.count(0) == 1 and res.n_missed == 2
    assert math.isclose(res.delay_error[0], DT)


def test_subtract_noise_floor():
    p = np.full(101, 0.01)
    p[[5, 40]] = [1.01, 0.26]
    np.testing.assert_allclose(ranging.subtract_noise_floor(p)[[0, 5, 40]], [0.0, 1.0, 0.25])
    assert np.all(ranging.subtract_noise_floor(p, floor=0.5) >= 0)


def test_noise_floor_removal_suppresses_false_peaks():
    cfg = ch.SoundingConfig()
    rng = np.random.default_rng(4)
    p = ch.PathSet.from_arrays(np.array([100, 180]) * DT, np.array([1.0, 0.5]))
    power = np.mean(np.abs(ch.synth_cir(p, cfg, 20.0, rng).taps) ** 2, axis=0)
    assert len(extract_paths(power, DT, threshold_db=-20)) > 2
    est = extract_paths(ranging.subtract_noise_floor(power), DT, threshold_db=-20)
    assert [round(e.delay / DT) for e in est] == [100, 180]
