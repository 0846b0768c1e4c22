import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_pdsi, naive_pet

from droughtcast.grid import GridSeries
from droughtcast.indices import (
    PDSI_PERSISTENCE,
    DailyClimate,
    MonthlyClimate,
    NoGrowingSeason,
    htc,
    mean_daylight_hours,
    pdsi,
    pdsi_grid,
    pdsi_recursion,
    pet_thornthwaite,
    read_value_csv,
    water_balance,
    write_value_csv,
)


def synthetic_monthly(years=10, seed=0, lat=41.5):
    rng = np.random.default_rng(seed)
    n = years * 12
    m = np.arange(n) % 12
    temps = 10 + 12 * np.sin(2 * np.pi * (m - 3) / 12) + rng.normal(0, 1.5, n)
    precip = np.maximum(70 + 25 * np.sin(2 * np.pi * (m - 2) / 12) + rng.normal(0, 40, n), 0.0)
    return precip, temps, lat


# HTC

def test_htc_hand_case():
    temps = np.array([20.0] * 60 + [5.0] * 10)
    precip = np.array([2.0] * 60 + [50.0] * 10)
    assert htc(DailyClimate(temps, precip)) == 1.0


def test_htc_no_growing_season():
    with pytest.raises(NoGrowingSeason, match="no growing season"):
        htc(DailyClimate(np.full(30, 10.0), np.ones(30)))


def test_htc_threshold_is_strict():
    assert htc(DailyClimate([10.0, 20.0], [100.0, 4.0])) == 10 * 4.0 / 20.0


def test_htc_matches_loop():
    rng = np.random.default_rng(3)
    temps = rng.uniform(-5, 30, 200)
    precip = rng.exponential(3.0, 200)
    sp = st_ = 0.0
    for t, p in zip(temps, precip):
        if t > 10:
            sp += p
            st_ += t
    assert htc(DailyClimate(temps, precip)) == pytest.approx(10 * sp / st_, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(11, 35), st.floats(0, 40)), min_size=1, max_size=40), st.randoms())
def test_htc_permutation_and_scaling(days, rnd):
    temps = np.array([d[0] for d in days])
    precip = np.array([d[1] for d in days])
    base = htc(DailyClimate(temps, precip))
    order = list(range(len(days)))
    rnd.shuffle(order)
    assert htc(DailyClimate(temps[order], precip[order])) == pytest.approx(base, rel=1e-12, abs=1e-300)
    assert htc(DailyClimate(temps, 2 * precip)) == 2 * base


def test_daily_climate_validation():
    with pytest.raises(ValueError):
        DailyClimate([20.0], [-1.0])
    with pytest.raises(ValueError):
        DailyClimate([20.0, 21.0], [1.0])


# PET

def test_pet_subfreezing_zero():
    temps = np.array([-5.0, -1.0, 2, 8, 14, 19, 22, 21, 16, 10, 3, -3])
    pet = pet_thornthwaite(temps, 45.0)
    assert pet[0] == 0.0 and pet[-1] == 0.0
    assert (pet >= 0).all()


def test_pet_equator_uniform_hand_formula():
    temps = np.full(12, 26.5)
    heat = 12 * (26.5 / 5) ** 1.514
    a = 6.75e-7 * heat**3 - 7.71e-5 * heat**2 + 1.792e-2 * heat + 0.49239
    daylight = mean_daylight_hours(0.0)
    np.testing.assert_allclose(daylight, 12.0, atol=1e-9)
    days = np.array([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31])
    expected = 16 * (12 / 12) * (days / 30) * (10 * 26.5 / heat) ** a
    np.testing.assert_allclose(pet_thornthwaite(temps, 0.0), expected, rtol=1e-12)


def test_pet_matches_oracle():
    _, temps, lat = synthetic_monthly(3)
    np.testing.assert_allclose(pet_thornthwaite(temps, lat, 4), naive_pet(list(temps), lat, 4), rtol=1e-11)


def test_pet_monotone_in_month_temperature():
    temps = np.array([-2.0, 0, 5, 10, 15, 20, 24, 23, 18, 11, 4, -1])
    warmer = temps.copy()
    warmer[6] += 3.0
    base = pet_thornthwaite(temps, 40.0)
    # hold the heat index fixed by scoring the warmer month with the original climatology
    hi = pet_thornthwaite(np.concatenate([temps, warmer]), 40.0)[12:]
    lo = pet_thornthwaite(np.concatenate([temps, temps]), 40.0)[12:]
    assert hi[6] >= lo[6]
    assert base.shape == (12,)


def test_pet_rejects_bad_latitude():
    with pytest.raises(ValueError):
        pet_thornthwaite(np.full(12, 10.0), 95.0)


# water balance

def test_water_balance_conserves_mass():
    precip, temps, lat = synthetic_monthly(5, seed=2)
    pet = pet_thornthwaite(temps, lat)
    wb = water_balance(precip, pet, 152.4)
    # P = ET + R + RO - L month by month
    np.testing.assert_allclose(precip, wb["et"] + wb["r"] + wb["ro"] - wb["loss"], atol=1e-9)
    storage = 152.4 - wb["pr"]
    np.testing.assert_allclose(np.diff(storage), (wb["r"] - wb["loss"])[:-1], atol=1e-9)
    assert (storage >= -1e-12).all() and (storage <= 152.4 + 1e-12).all()


def test_single_layer_when_awc_small():
    wb = water_balance(np.array([0.0, 0.0]), np.array([5.0, 30.0]), 20.0)
    assert wb["loss"].tolist() == [5.0, 15.0]


# PDSI

def test_pdsi_recursion_closed_form():
    x = pdsi_recursion([3.0] + [0.0] * 9)
    np.testing.assert_allclose(x, PDSI_PERSISTENCE ** np.arange(10), rtol=1e-15)


def test_pdsi_impulse_decay_exact():
    x = pdsi_recursion([3.0, -1.0, 0, 0, 0, 0, 0])
    for i in range(2, 6):
        assert x[i + 1] / x[i] == pytest.approx(0.897, abs=1e-15)


def test_zero_departure_climate():
    # wet enough that the soil never leaves field capacity; every year identical
    months = np.arange(120) % 12
    temps = 12 + 10 * np.sin(2 * np.pi * (months - 3) / 12)
    precip = 200 + 20 * np.cos(2 * np.pi * months / 12)
    st_ = pdsi(MonthlyClimate(precip, temps, 45.0))
    assert np.abs(st_.d).max() < 1e-9
    assert np.abs(st_.X).max() <= 1e-9


def test_zero_departure_dry_periodic_climate():
    # periodic but with seasonal drawdown; the bucket settles after its first cycle
    months = np.arange(240) % 12
    temps = 14 + 12 * np.sin(2 * np.pi * (months - 3) / 12)
    precip = 60 + 50 * np.sin(2 * np.pi * (months - 9) / 12)
    state = pdsi(MonthlyClimate(precip, temps, 40.0))
    wb_year = state.et[12:24]
    np.testing.assert_allclose(state.et[24:36], wb_year, atol=1e-9)


def test_pdsi_matches_naive_oracle():
    precip, temps, lat = synthetic_monthly(10, seed=11)
    ours = pdsi(MonthlyClimate(precip, temps, lat)).X
    ref = naive_pdsi(list(precip), list(temps), lat)
    assert np.max(np.abs(ours - np.array(ref))) <= 0.05


@pytest.mark.parametrize("seed,awc,start", [(1, 152.4, 1), (2, 60.0, 5), (3, 20.0, 10)])
def test_pdsi_oracle_other_settings(seed, awc, start):
    precip, temps, lat = synthetic_monthly(10, seed=seed, lat=35.0)
    ours = pdsi(MonthlyClimate(precip, temps, lat, awc, start)).X
    ref = naive_pdsi(list(precip), list(temps), lat, awc, start)
    assert np.max(np.abs(ours - np.array(ref))) <= 0.05


def test_pdsi_x_follows_recursion():
    precip, temps, lat = synthetic_monthly(4, seed=5)
    st_ = pdsi(MonthlyClimate(precip, temps, lat))
    assert st_.X[0] == st_.Z[0] / 3
    np.testing.assert_allclose(st_.X[1:], 0.897 * st_.X[:-1] + st_.Z[1:] / 3, rtol=1e-13, atol=1e-13)
    assert st_.K.shape == (12,) and np.isfinite(st_.K).all()


def test_pdsi_partial_year_tail_uses_whole_years():
    precip, temps, lat = synthetic_monthly(5, seed=7)
    tail = pdsi(MonthlyClimate(precip[:53], temps[:53] + 20.0, lat))
    assert tail.X.size == 53
    for m in range(12):
        sel = np.arange(48) % 12 == m
        assert tail.alpha[m] == pytest.approx(tail.et[:48][sel].mean() / tail.pet[:48][sel].mean(), rel=1e-14)


def test_monthly_climate_validation():
    with pytest.raises(ValueError):
        MonthlyClimate(np.ones(11), np.ones(11), 0.0)
    with pytest.raises(ValueError):
        MonthlyClimate(np.ones(12), np.full(12, np.nan), 0.0)
    with pytest.raises(ValueError):
        MonthlyClimate(np.ones(12), np.ones(12), 0.0, awc=0.0)
    with pytest.raises(ValueError):
        MonthlyClimate(-np.ones(12), np.ones(12), 0.0)


# grids

def _grid_pair(H=3, W=3, years=4, seed=0):
    rng = np.random.default_rng(seed)
    n = years * 12
    m = np.arange(n)[:, None, None] % 12
    temps = 10 + 12 * np.sin(2 * np.pi * (m - 3) / 12) + rng.normal(0, 2, (n, H, W))
    precip = np.maximum(60 + rng.normal(0, 35, (n, H, W)), 0)
    return GridSeries(precip, (1990, 1)), GridSeries(temps, (1990, 1))


def test_pdsi_grid_equals_cell_loop():
    precip, temps = _grid_pair()
    lats = [44.0, 43.5, 43.0]
    out = pdsi_grid(precip, temps, lats)
    for r in range(3):
        for c in range(3):
            ref = pdsi(MonthlyClimate(precip.values[:, r, c], temps.values[:, r, c], lats[r])).X
            np.testing.assert_array_equal(out.values[:, r, c], ref)


def test_pdsi_grid_single_cell_and_identical_cells():
    precip, temps = _grid_pair(1, 1)
    out = pdsi_grid(precip, temps, 30.0)
    np.testing.assert_array_equal(out.values[:, 0, 0],
                                  pdsi(MonthlyClimate(precip.values[:, 0, 0], temps.values[:, 0, 0], 30.0)).X)
    wide_p = GridSeries(np.repeat(precip.values, 2, axis=2))
    wide_t = GridSeries(np.repeat(temps.values, 2, axis=2))
    two = pdsi_grid(wide_p, wide_t, 30.0)
    np.testing.assert_array_equal(two.values[:, 0, 0], two.values[:, 0, 1])


def test_pdsi_grid_mask_union():
    precip, temps = _grid_pair(2, 2)
    pv = precip.values.copy()
    pv[:, 0, 1] = np.nan
    tv = temps.values.copy()
    tv[:, 1, 0] = np.nan
    out = pdsi_grid(GridSeries(pv, (1990, 1)), GridSeries(tv, (1990, 1)), 40.0)
    assert out.mask.tolist() == [[True, False], [False, True]]


def test_pdsi_grid_dimension_mismatch():
    precip, _ = _grid_pair(2, 2)
    _, temps = _grid_pair(2, 3)
    with pytest.raises(ValueError):
        pdsi_grid(precip, temps, 40.0)


def test_value_csv_round_trip(tmp_path):
    vals = np.array([0.1, 2.5, math.pi])
    write_value_csv(vals, tmp_path / "v.csv")
    np.testing.assert_array_equal(read_value_csv(tmp_path / "v.csv"), vals)
    (tmp_path / "bad.csv").write_text("x\n1\n")
    with pytest.raises(ValueError):
        read_value_csv(tmp_path / "bad.csv")
