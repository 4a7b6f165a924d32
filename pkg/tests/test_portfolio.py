import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from simplewealth.market import FixedJump, ModelSpec, TimeGrid, TwoPointJump, returns_from_prices, simulate
from simplewealth.portfolio import (
    AbsorptionError,
    ConstantFraction,
    ConstraintViolation,
    Partition,
    TableLookup,
    UnitSchedule,
    Violation,
    WealthPaths,
    bankruptcy_index,
    check_no_short_sales,
    epsilon_shift,
    first_negative_index,
    fractions_from_units,
    project_capped_simplex,
    ramp_strategy,
    target_tracking_schedule,
    units_from_fractions,
    wealth_additive_units,
    wealth_continuous,
    wealth_multiplicative,
)


def fixture_paths(prices):
    prices = np.asarray(prices, dtype=float)
    n = prices.shape[0] - 1
    return simulate(ModelSpec.fixture(prices), TimeGrid(float(n), n), 1, seed=0)


def oracle_multiplicative(x, pi, dates, s):
    """Loop form of buy-and-hold between dates: wealth at every fine index."""
    out = [x]
    wealth_at_date = x
    for j in range(len(dates) - 1):
        a, b = dates[j], dates[j + 1]
        for k in range(a + 1, b + 1):
            ratio = (s[k] - s[a]) / s[a] if s[a] > 0 else 0.0
            out.append(wealth_at_date * (1 + pi * ratio))
        wealth_at_date = out[-1]
    return np.array(out)


def oracle_additive_target(x, pi, dates, s):
    """Units theta = pi * Xhat / S fixed at each date, wealth x + sum theta dS."""
    xhat = [x]
    for k in range(1, len(s)):
        xhat.append(xhat[-1] * (1 + pi * (s[k] - s[k - 1]) / s[k - 1]))
    wealth, theta = [x], None
    for k in range(1, len(s)):
        if k - 1 in dates:
            theta = pi * xhat[k - 1] / s[k - 1]
        wealth.append(wealth[-1] + theta * (s[k] - s[k - 1]))
    return np.array(wealth), theta


# ---------------------------------------------------------------------------
# conversions


def test_units_from_fractions_examples():
    assert units_from_fractions([0.5], [50.0], 200.0)[0] == 2.0
    assert units_from_fractions([0.0], [50.0], 200.0)[0] == 0.0
    with pytest.raises(ConstraintViolation):
        units_from_fractions([0.3], [0.0], 1.0)


def test_fractions_from_units_examples():
    assert fractions_from_units([2.0], [50.0], 200.0)[0] == 0.5
    assert fractions_from_units([0.0], [50.0], 200.0)[0] == 0.0
    with pytest.raises(ConstraintViolation) as err:
        fractions_from_units([5.0], [50.0], 200.0)
    assert err.value.report[0][0] == "baseline-short"
    assert err.value.report[0][1] == pytest.approx(50.0)
    with pytest.raises(ConstraintViolation, match="negative-units"):
        fractions_from_units([-0.1], [50.0], 200.0)


simplex_points = arrays(np.float64, st.integers(1, 4), elements=st.floats(0, 1)).map(
    project_capped_simplex)


@settings(max_examples=200)
@given(pi=simplex_points, x=st.floats(1e-6, 1e6), scale=st.floats(1e-3, 1e3))
def test_conversion_round_trip(pi, x, scale):
    s = scale * (1.0 + np.arange(pi.size))
    theta = units_from_fractions(pi, s, x)
    assert np.all(theta >= 0)
    np.testing.assert_allclose(np.sum(theta * s), pi.sum() * x, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(fractions_from_units(theta, s, x), pi, rtol=1e-12, atol=1e-300)


@settings(max_examples=200)
@given(y=arrays(np.float64, st.integers(1, 5), elements=st.floats(-3, 3)))
def test_projection_lands_in_simplex(y):
    z = project_capped_simplex(y)
    assert np.all(z >= 0) and z.sum() <= 1 + 1e-12
    # projection is idempotent
    np.testing.assert_allclose(project_capped_simplex(z), z, atol=1e-14)


# ---------------------------------------------------------------------------
# engines on hand examples


def test_continuous_examples():
    paths = fixture_paths([100, 110, 99])
    ret = returns_from_prices(paths)
    np.testing.assert_allclose(wealth_continuous(1.0, ConstantFraction(pi=(0.5,)), ret).values[0],
                               [1.0, 1.05, 0.9975], rtol=1e-14)
    assert np.all(wealth_continuous(3.0, ConstantFraction(pi=(0.0,)), ret).values == 3.0)
    np.testing.assert_allclose(wealth_continuous(2.0, ConstantFraction(pi=(1.0,)), ret).values[0],
                               [2.0, 2.2, 1.98], rtol=1e-14)


def test_multiplicative_single_interval():
    paths = fixture_paths([100, 110, 99])
    w = wealth_multiplicative(1.0, ConstantFraction(pi=(0.5,)), Partition.from_indices([0, 2], 2), paths)
    np.testing.assert_allclose(w.values[0], [1.0, 1.05, 0.995], rtol=1e-14)


def test_additive_examples():
    paths = fixture_paths([100, 110, 99])
    one = UnitSchedule(np.ones((1, 2, 1)), np.ones((1, 3), bool))
    np.testing.assert_array_equal(wealth_additive_units(100.0, one, paths).values[0], [100, 110, 99])
    zero = UnitSchedule(np.zeros((1, 2, 1)), np.ones((1, 3), bool))
    assert np.all(wealth_additive_units(7.0, zero, paths).values == 7.0)


def test_negative_wealth_fixture():
    s = [1.0, 10.0, 1.0, 0.0]
    paths = fixture_paths(s)
    pi = ConstantFraction(pi=(0.99,))
    part = Partition.from_indices([0, 2, 3], 3)

    want_add, want_theta = oracle_additive_target(1.0, 0.99, {0, 2}, s)
    want_mult = oracle_multiplicative(1.0, 0.99, [0, 2, 3], s)

    schedule = target_tracking_schedule(1.0, pi, part, paths)
    additive = wealth_additive_units(1.0, schedule, paths)
    mult = wealth_multiplicative(1.0, pi, part, paths)

    np.testing.assert_allclose(additive.values[0], want_add, rtol=0, atol=1e-12)
    np.testing.assert_allclose(mult.values[0], want_mult, rtol=0, atol=1e-12)
    assert abs(additive.terminal[0] - (-0.0693881)) < 1e-12
    assert abs(mult.terminal[0] - 0.01) < 1e-12
    assert abs(schedule.units[0, 2, 0] - want_theta) < 1e-12
    assert first_negative_index(additive) == [3]

    assert check_no_short_sales(schedule, paths, additive) == [Violation(0, 2, "baseline-short")]
    assert check_no_short_sales(mult.units, paths, mult) == []


def test_negative_units_flagged():
    paths = fixture_paths([1.0, 1.1, 1.2])
    units = np.array([[[0.5], [-0.1]]])
    sched = UnitSchedule(units, np.ones((1, 3), bool))
    w = wealth_additive_units(1.0, sched, paths)
    assert check_no_short_sales(sched, paths, w) == [Violation(0, 1, "negative-units")]


def test_zero_initial_wealth():
    paths = simulate(ModelSpec.black_scholes(0.1, 0.3, s0=1.0), TimeGrid(1.0, 32), 5, seed=4)
    pi = ConstantFraction(pi=(0.7,))
    assert np.all(wealth_continuous(0.0, pi, returns_from_prices(paths)).values == 0)
    assert np.all(wealth_multiplicative(0.0, pi, Partition.from_indices([0, 16, 32], 32), paths).values == 0)


def test_bankrupt_asset_is_masked():
    paths = fixture_paths([1.0, 0.0, 0.0])
    table = TableLookup(values=np.full((2, 1), 0.5))
    np.testing.assert_array_equal(table.table(paths)[0, :, 0], [0.5, 0.0])
    w = wealth_continuous(1.0, table, returns_from_prices(paths))
    np.testing.assert_array_equal(w.values[0], [1.0, 0.5, 0.5])


def test_full_investment_in_dying_asset_logs_bankruptcy(caplog):
    paths = fixture_paths([1.0, 2.0, 0.0, 0.0])
    with caplog.at_level(logging.INFO, logger="simplewealth.portfolio"):
        w = wealth_continuous(1.0, ConstantFraction(pi=(1.0,)), returns_from_prices(paths))
    np.testing.assert_array_equal(w.values[0], [1.0, 2.0, 0.0, 0.0])
    assert "bankruptcy applied" in caplog.text
    assert bankruptcy_index(w) == [2]


def test_strategy_outside_simplex_rejected():
    with pytest.raises(ConstraintViolation):
        ConstantFraction(pi=(0.7, 0.6))
    paths = fixture_paths([1.0, 1.0])
    with pytest.raises(ConstraintViolation):
        TableLookup(values=np.array([[1.2]])).table(paths)


def test_ramp_is_adapted_left_endpoint():
    paths = simulate(ModelSpec.black_scholes(0.0, 0.0, s0=1.0), TimeGrid(1.0, 4), 1, seed=0)
    np.testing.assert_allclose(ramp_strategy(0.9).table(paths)[0, :, 0], [0, 0.25, 0.5, 0.75])


# ---------------------------------------------------------------------------
# epsilon shift and bankruptcy


def _wealth(values, constrained=True):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return WealthPaths(TimeGrid(1.0, values.shape[1] - 1), values, "test", constrained=constrained)


def test_epsilon_shift_examples():
    assert epsilon_shift(_wealth([1, 0.5, 0]), 1.0, 0.1).values[0, -1] == pytest.approx(0.1, abs=1e-15)
    assert np.all(epsilon_shift(_wealth([1, 1, 1]), 1.0, 0.1).values == 1.0)
    assert epsilon_shift(_wealth([1, 1.5, 2]), 1.0, 0.1).values[0, -1] == pytest.approx(1.9, abs=1e-15)
    with pytest.raises(ValueError):
        epsilon_shift(_wealth([1, 1]), 1.0, 1.0)
    with pytest.raises(ValueError):
        epsilon_shift(_wealth([1, 1]), 1.0, 0.0)


def test_bankruptcy_examples():
    assert bankruptcy_index(_wealth([1, 0, 0, 0])) == [1]
    assert bankruptcy_index(_wealth([1, 2, 3])) == [None]
    with pytest.raises(AbsorptionError):
        bankruptcy_index(_wealth([1, 0, 0.2, 0]))
    # unconstrained engines are allowed to come back
    assert bankruptcy_index(_wealth([1, 0, 0.2, 0], constrained=False)) == [1]


# ---------------------------------------------------------------------------
# properties over random models, strategies and partitions


@st.composite
def market_case(draw):
    d = draw(st.integers(1, 3))
    n = draw(st.integers(2, 40))
    sigma = draw(st.floats(0.0, 0.9))
    low = draw(st.floats(-1.0, 0.0))
    model = ModelSpec.merton([0.05] * d, [sigma] * d, s0=[1.0] * d, intensity=[2.0] * d,
                             jump_law=TwoPointJump(low, 0.3))
    grid = TimeGrid(1.0, max(n, 21))
    raw = draw(arrays(np.float64, (grid.n_steps, d), elements=st.floats(0, 1)))
    table = np.array([project_capped_simplex(r) for r in raw])
    inner = draw(st.lists(st.integers(1, grid.n_steps - 1), max_size=8))
    part = Partition.from_indices([0, grid.n_steps, *inner], grid.n_steps)
    seed = draw(st.integers(0, 2**32))
    return model, grid, TableLookup(values=table), part, seed


@settings(max_examples=60, deadline=None)
@given(case=market_case(), x=st.floats(0.1, 10.0))
def test_multiplicative_invariants(case, x):
    model, grid, strategy, part, seed = case
    paths = simulate(model, grid, 6, seed=seed)
    mult = wealth_multiplicative(x, strategy, part, paths)
    # nonnegativity and absorption
    assert np.all(mult.values >= 0)
    bankruptcy_index(mult)
    assert np.all(mult.values[:, 0] == x)
    # constraint soundness of the implied units
    assert check_no_short_sales(mult.units, paths, mult) == []
    # implied units rebuild the same wealth through the unit form
    np.testing.assert_allclose(wealth_additive_units(x, mult.units, paths).values, mult.values,
                               rtol=1e-10, atol=1e-12 * x)
    # piecewise constancy between dates
    closes = part.for_paths(paths.n_paths)[:, 1:-1]
    same = mult.units.units[:, 1:] == mult.units.units[:, :-1]
    assert np.all(same[~closes])


@settings(max_examples=60, deadline=None)
@given(case=market_case(), x=st.floats(0.1, 10.0))
def test_finest_partition_matches_continuous(case, x):
    model, grid, strategy, _, seed = case
    paths = simulate(model, grid, 6, seed=seed)
    cont = wealth_continuous(x, strategy, returns_from_prices(paths))
    mult = wealth_multiplicative(x, strategy, Partition.fine(grid.n_steps), paths)
    np.testing.assert_allclose(mult.values, cont.values, rtol=1e-12, atol=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), jump=st.floats(-1.0, 1.0), x=st.floats(0.1, 10.0),
       inner=st.lists(st.integers(1, 31), max_size=6))
def test_full_investment_exactness(seed, jump, x, inner):
    model = ModelSpec.merton(0.05, 0.3, s0=2.0, intensity=1.0, jump_law=FixedJump(jump))
    grid = TimeGrid(1.0, 32)
    paths = simulate(model, grid, 5, seed=seed)
    s = paths.values[:, :, 0]
    want = x * s / s[:, :1]
    pi = ConstantFraction(pi=(1.0,))
    part = Partition.from_indices([0, 32, *inner], 32)
    cont = wealth_continuous(x, pi, returns_from_prices(paths))
    mult = wealth_multiplicative(x, pi, part, paths)
    add = wealth_additive_units(x, target_tracking_schedule(x, pi, part, paths), paths)
    for w in (cont, mult):
        np.testing.assert_allclose(w.values, want, rtol=1e-12, atol=1e-300)
    # the unit form carries the rounding of theta * S_0 against x as a cash floor
    np.testing.assert_allclose(add.values, want, rtol=1e-12, atol=1e-15 * x)


@settings(max_examples=60, deadline=None)
@given(case=market_case(), eps_frac=st.floats(0.01, 0.99))
def test_epsilon_shift_attainable(case, eps_frac):
    model, grid, strategy, part, seed = case
    x = 1.0
    paths = simulate(model, grid, 4, seed=seed)
    mult = wealth_multiplicative(x, strategy, part, paths)
    shifted = epsilon_shift(mult, x, eps_frac * x)
    assert np.all(shifted.values >= eps_frac * x * (1 - 1e-12))
    assert np.all(shifted.values[:, 0] == x)
    # same units against the shifted wealth: simplex-valued fractions and the same gains
    s_minus = paths.values[:, :-1, :]
    pi = fractions_from_units(shifted.units.units, s_minus, shifted.values[:, :-1])
    assert np.all(pi >= 0) and np.all(pi.sum(axis=-1) <= 1 + 1e-12)
    np.testing.assert_allclose(wealth_additive_units(x, shifted.units, paths).values,
                               shifted.values, rtol=1e-10)
