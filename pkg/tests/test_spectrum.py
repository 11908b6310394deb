import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectral_watermark.errors import InsufficientDataError, InvalidInputError
from spectral_watermark.spectrum import (ENSEMBLE_FILTER, SINGLE_TEACHER_FILTER, FilterPolicy,
                                         PairedSeries, chi_sq_const, extract_signal,
                                         filter_threshold, fit_sinusoid, frequency_grid,
                                         periodogram, snr_from_periodogram)
from spectral_watermark.wmcore import WatermarkKey

F_W = 30.0


def cosine_series(L=200, f=F_W, periods=6, noise=0.0, seed=0, alpha=0.0, beta=1.0, gamma=0.0):
    rng = np.random.default_rng(seed)
    half = periods * math.pi / f
    p = rng.uniform(-half, half, L)
    q = alpha + beta * np.cos(f * p + gamma) + noise * rng.standard_normal(L)
    return PairedSeries(p, q)


def snr(series, f=F_W, bins=5, size=512):
    grid = frequency_grid(2 * f, size)
    return snr_from_periodogram(periodogram(series, grid), f, bins * 2 * f / size)[2]


# -- fits ----------------------------------------------------------------------

def test_fit_recovers_exact_parameters():
    p = np.linspace(-0.4, 0.5, 50)
    q = 0.5 + 0.3 * np.cos(F_W * p + 1.0)
    fit = fit_sinusoid(PairedSeries(p, q), F_W)
    assert fit.alpha == pytest.approx(0.5, abs=1e-8)
    assert fit.beta == pytest.approx(0.3, abs=1e-8)
    assert fit.gamma == pytest.approx(1.0, abs=1e-8)
    assert fit.chi_sq < 1e-16
    assert np.allclose(fit(p), q)


def test_fit_constant_series():
    fit = fit_sinusoid(PairedSeries(np.linspace(0, 1, 20), np.full(20, 0.7)), 5.0)
    assert fit.alpha == pytest.approx(0.7) and fit.beta == pytest.approx(0, abs=1e-12)
    assert fit.chi_sq == pytest.approx(0, abs=1e-20)


def test_fit_degenerate_design_gives_min_norm():
    # all p equal: cos and sin columns are constant, rank 1
    s = PairedSeries(np.zeros(10), np.linspace(0, 1, 10))
    fit = fit_sinusoid(s, 2.0)
    assert np.isfinite(fit.beta) and fit.chi_sq == pytest.approx(chi_sq_const(s))


def test_chi0_definition():
    s = cosine_series(L=40, noise=0.1)
    assert chi_sq_const(s) == pytest.approx(np.sum((s.q - s.q.mean()) ** 2))


@pytest.mark.parametrize("n", [0, 1, 2])
def test_fit_needs_three_points(n):
    with pytest.raises(InsufficientDataError) as info:
        fit_sinusoid(PairedSeries(np.arange(n), np.arange(n)), 1.0)
    assert info.value.survivors == n


def test_fit_rejects_bad_frequency():
    with pytest.raises(InvalidInputError):
        fit_sinusoid(cosine_series(L=10), 0.0)


def test_paired_series_length_mismatch():
    with pytest.raises(InvalidInputError):
        PairedSeries([1, 2, 3], [1, 2])


def test_grid_search_agrees_with_least_squares():
    """Oracle: dense search over the phase, closed-form offset and amplitude."""
    rng = np.random.default_rng(11)
    gammas = np.linspace(0, 2 * np.pi, 100_000, endpoint=False)
    for trial in range(10):
        L = int(rng.integers(5, 51))
        p = rng.uniform(-1, 1, L)
        q = rng.random(L)
        f = rng.uniform(0.5, 20)
        best = math.inf
        for chunk in np.array_split(gammas, 20):
            c = np.cos(f * p[None, :] + chunk[:, None])  # (G, L)
            cm = c - c.mean(axis=1, keepdims=True)
            qm = q - q.mean()
            beta = (cm @ qm) / np.einsum("gl,gl->g", cm, cm)
            resid = qm[None, :] - beta[:, None] * cm
            best = min(best, np.einsum("gl,gl->g", resid, resid).min())
        assert fit_sinusoid(PairedSeries(p, q), f).chi_sq == pytest.approx(best, abs=1e-4)


@settings(max_examples=60)
@given(st.integers(3, 40), st.floats(0.1, 100), st.integers(0, 10_000))
def test_power_bounded_by_half_chi0(L, f, seed):
    rng = np.random.default_rng(seed)
    s = PairedSeries(rng.uniform(-2, 2, L), rng.random(L))
    pg = periodogram(s, frequency_grid(f, 32))
    assert np.all(pg.powers >= 0)
    assert np.all(pg.powers <= pg.chi0 / 2 + 1e-9)


# -- periodogram ------------------------------------------------------------------

def test_pure_cosine_peak():
    s = cosine_series()
    grid = frequency_grid(2 * F_W)
    pg = periodogram(s, grid)
    k = int(np.argmax(pg.powers))
    assert abs(grid[k] - F_W) < 1e-9
    assert pg.powers[k] == pytest.approx(pg.chi0 / 2, rel=0.05)
    assert pg.chi0 / 2 == pytest.approx(len(s) / 4, rel=0.2)


def test_constant_series_has_no_power():
    s = PairedSeries(np.linspace(0, 3, 30), np.full(30, 0.2))
    assert np.all(periodogram(s, frequency_grid(10.0, 64)).powers < 1e-25)


def test_noisy_cosine_peak_stays():
    grid = frequency_grid(2 * F_W)
    for seed in range(20):
        pg = periodogram(cosine_series(noise=0.01, seed=seed), grid)
        assert abs(grid[np.argmax(pg.powers)] - F_W) < 1e-9


def test_snr_decreases_with_noise_on_average():
    levels = [0.05, 0.3, 1.0, 3.0]
    means = [np.mean([snr(cosine_series(noise=s, seed=k)) for k in range(20)]) for s in levels]
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_grid_validation():
    s = cosine_series(L=10)
    for bad in ([], [0.0, 1.0], [2.0, 1.0], [[1.0, 2.0]]):
        with pytest.raises(InvalidInputError):
            periodogram(s, np.array(bad))


def test_grid_is_even_and_excludes_zero():
    g = frequency_grid(60.0, 512)
    assert g[0] > 0 and g[-1] == 60.0 and np.allclose(np.diff(g), 60.0 / 512)


def test_periodogram_csv():
    pg = periodogram(cosine_series(L=20), frequency_grid(60.0, 16))
    lines = pg.to_csv().splitlines()
    assert lines[0] == "frequency,power" and len(lines) == 17


def test_zero_noise_power_is_flagged():
    pg = periodogram(cosine_series(L=20), frequency_grid(60.0, 16))
    pg.powers[:] = 0.0
    pg.powers[7] = 1.0
    ps, pn, ratio, inf = snr_from_periodogram(pg, pg.frequencies[7], 1e-3)
    assert inf and ratio == math.inf and pn == 0.0


# -- filter ------------------------------------------------------------------------

def test_filter_thresholds():
    assert filter_threshold([0.1, 0.2, 0.3, 0.4], ENSEMBLE_FILTER) == pytest.approx(0.25)
    assert filter_threshold(np.arange(1, 9), SINGLE_TEACHER_FILTER) == pytest.approx(2.75)
    assert filter_threshold([0.9, 0.1], FilterPolicy("absolute", 0.5)) == 0.5
    assert filter_threshold([0.2, 0.4], FilterPolicy("median", scale=0.5)) == pytest.approx(0.15)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_first_quartile_matches_linear_interpolation(vals):
    # oracle: position h = (n - 1) / 4 in the sorted values, linear interpolation
    s = sorted(vals)
    h = (len(s) - 1) * 0.25
    lo = math.floor(h)
    expect = s[lo] + (h - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo])
    assert filter_threshold(vals, SINGLE_TEACHER_FILTER) == pytest.approx(expect, abs=1e-12)


def test_filter_errors():
    with pytest.raises(InvalidInputError):
        filter_threshold([], ENSEMBLE_FILTER)
    with pytest.raises(InvalidInputError):
        FilterPolicy("absolute")
    with pytest.raises(InvalidInputError):
        FilterPolicy("mean")
    with pytest.raises(InvalidInputError):
        FilterPolicy(keep="sideways")


# -- extraction ----------------------------------------------------------------------

def synthetic_outputs(key, L=300, eps=0.1, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((L, key.dim))
    c = np.cos(key.frequency * (x @ key.projection))
    q0 = 0.5 + eps * c
    return np.column_stack([q0, 1 - q0]), x


def test_extract_matching_and_wrong_key():
    key = WatermarkKey.random(8, 25.0, rng=1)
    wrong = WatermarkKey.random(8, 25.0, rng=2)
    out, x = synthetic_outputs(key)
    good = extract_signal(out, x, key)
    bad = extract_signal(out, x, wrong)
    assert good.p_snr > 5 and bad.p_snr < 2
    assert good.survivors == int(np.sum(out[:, 0] > good.threshold))
    d = good.to_dict()
    assert set(d) >= {"p_signal", "p_noise", "p_snr", "f_w", "delta", "F", "survivors"}
    assert d["F"] == 50.0 and d["delta"] == pytest.approx(5 * 50.0 / 512)


def test_extract_keep_below_and_reference():
    key = WatermarkKey.random(8, 25.0, rng=1)
    out, x = synthetic_outputs(key)
    ref = np.zeros(len(x), bool)
    ref[:50] = True
    pol = FilterPolicy("median", scale=1.0, keep="below")
    rep = extract_signal(out, x, key, pol, reference=ref)
    assert rep.threshold == pytest.approx(np.median(out[:50, 0]))
    assert rep.survivors == int(np.sum(out[:, 0] < rep.threshold))


def test_extract_insufficient_survivors():
    key = WatermarkKey.random(4, 5.0, rng=0)
    out, x = synthetic_outputs(key, L=20)
    with pytest.raises(InsufficientDataError) as info:
        extract_signal(out, x, key, FilterPolicy("absolute", 2.0))
    assert info.value.survivors == 0


def test_extract_input_validation():
    key = WatermarkKey.random(4, 5.0, rng=0)
    out, x = synthetic_outputs(key, L=20)
    with pytest.raises(InvalidInputError):
        extract_signal(out[:10], x, key)
    with pytest.raises(InvalidInputError, match="dimension"):
        extract_signal(out, x[:, :3], key)
    with pytest.raises(InvalidInputError):
        extract_signal(out, x, key, grid_size=4)
    with pytest.raises(InvalidInputError):
        extract_signal(out[:, :1], x, WatermarkKey(1, 5.0, key.projection))


def test_snr_report_json_infinite():
    from spectral_watermark.spectrum import SnrReport
    rep = SnrReport(1.0, 0.0, math.inf, 1.0, 0.1, 2.0, 10, 0.5, True)
    assert '"p_snr": "inf"' in rep.to_json()
