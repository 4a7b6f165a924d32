import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _catalog import black_scholes_utility, lattice_problems, merton_utility
from simplewealth.convergence import PartitionSequenceSpec
from simplewealth.market import FixedJump, ModelSpec, TimeGrid, TwoPointJump
from simplewealth.portfolio import ConstantFraction
from simplewealth.utility import (
    CRRAUtility,
    GrowthProblem,
    LogUtility,
    NonConcaveError,
    PiecewiseConcave,
    SupermartingaleFamily,
    UtilityConfig,
    brownian_paths,
    concavity_gap,
    evaluate_utility,
    expected_utility,
    lattice_certificate,
    optimize_constant_fraction,
    run_indirect_utility_gap,
    run_terminal_convergence,
    run_uniform_convergence,
    simplex_lattice,
    strict_concavity_constant,
    supermartingale_convergence_check,
)


def test_evaluate_utility_examples():
    assert evaluate_utility(LogUtility(), 1.0) == 0.0
    assert evaluate_utility(CRRAUtility(2.0), 2.0) == pytest.approx(0.5, abs=1e-15)
    assert evaluate_utility(LogUtility(), 0.0) == -math.inf
    assert evaluate_utility(CRRAUtility(0.5), 0.0) == pytest.approx(-2.0)
    with pytest.raises(ValueError):
        evaluate_utility(LogUtility(), -1.0)
    with pytest.raises(ValueError):
        CRRAUtility(1.0)


def test_expected_utility_examples():
    assert expected_utility(np.ones(5), LogUtility()) == (0.0, 0.0, 0)
    mean, se, hits = expected_utility([1.0, math.e**2], LogUtility())
    assert mean == pytest.approx(1.0, abs=1e-15) and hits == 0
    assert se == pytest.approx(1.0, abs=1e-15)
    mean, _, hits = expected_utility([1.0, 0.0, 2.0], LogUtility())
    assert mean == -math.inf and hits == 1
    with pytest.raises(ValueError):
        expected_utility([1.0], LogUtility())


def test_piecewise_table():
    u = PiecewiseConcave(knots=(0, 1, 3), values=(0, 2, 3))
    np.testing.assert_allclose(u(np.array([0, 0.5, 2, 5])), [0, 1, 2.5, 4])
    np.testing.assert_allclose(u.derivative(np.array([0.5, 2, 5])), [2, 0.5, 0.5])
    with pytest.raises(ValueError):
        PiecewiseConcave(knots=(0, 1, 2), values=(0, 1, 3))


@pytest.mark.parametrize("U", [LogUtility(), CRRAUtility(0.5), CRRAUtility(2.0), CRRAUtility(5.0),
                               PiecewiseConcave(knots=(0, 1, 2, 4), values=(0, 1, 1.5, 1.75))])
def test_concavity_probe(U):
    rng = np.random.default_rng(17)
    a = rng.uniform(1e-3, 10, 1000)
    b = a + rng.uniform(1e-3, 10, 1000)
    gap = concavity_gap(U, a, b)
    assert np.all(gap >= -1e-12)
    assert np.all(np.diff(U(np.sort(a))) >= 0)
    if U.strict:
        # bounded below on a compact away from the diagonal
        a2 = rng.uniform(0.5, 4, 1000)
        b2 = a2 + rng.uniform(0.5, 4, 1000)
        assert np.min(concavity_gap(U, a2, b2)) > 1e-6


def test_strict_concavity_constant():
    assert strict_concavity_constant(LogUtility(), 1) == math.inf  # K_1 is empty
    beta2 = strict_concavity_constant(LogUtility(), 2)
    # for log the gap shrinks as the pair moves right and closes up: infimum at (1.5, 2)
    want = math.log(1.75) - 0.5 * math.log(3.0)
    assert want <= beta2 < want * 1.05
    assert strict_concavity_constant(PiecewiseConcave(knots=(0, 10), values=(0, 1)), 2) == pytest.approx(0, abs=1e-15)


# ---------------------------------------------------------------------------
# optimizer


def problem(mu, sigma, intensity=0.0, law=None, gamma=1.0):
    return GrowthProblem.from_model(ModelSpec.merton(mu, sigma, intensity=intensity, jump_law=law), gamma)


def test_optimizer_examples():
    res = optimize_constant_fraction(problem(0.08, 0.2))
    assert res.pi[0] == 1.0 and res.value == pytest.approx(0.06, abs=1e-15)
    res = optimize_constant_fraction(problem(0.02, 0.2))
    assert res.pi[0] == pytest.approx(0.5, abs=1e-6) and res.value == pytest.approx(0.005, abs=1e-12)
    assert optimize_constant_fraction(problem(-0.01, 0.2)).pi[0] == 0.0
    res = optimize_constant_fraction(problem([-0.01, 0.0], [0.2, 0.1]))
    assert np.all(res.pi == 0)


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(-0.2, 0.3), sigma=st.floats(0.05, 0.6))
def test_optimizer_matches_clip(mu, sigma):
    res = optimize_constant_fraction(problem(mu, sigma))
    assert abs(res.pi[0] - min(max(mu / sigma**2, 0.0), 1.0)) < 1e-6
    assert lattice_certificate(problem(mu, sigma), res) <= 1e-8


def test_merton_optimum_first_order_condition():
    p = problem(0.15, 0.2, 1.0, TwoPointJump(-0.4, 0.25))
    res = optimize_constant_fraction(p)
    assert 0 < res.pi[0] < 1
    # interior optimum: g'(pi) = mu - sigma^2 pi + lambda E[J / (1 + pi J)] = 0
    pi = res.pi[0]
    slope = 0.15 - 0.04 * pi + 0.5 * (-0.4 / (1 - 0.4 * pi) + 0.25 / (1 + 0.25 * pi))
    assert abs(slope) < 1e-8
    assert pi == pytest.approx(0.45248, abs=1e-5)


@pytest.mark.parametrize("name", sorted(lattice_problems()))
def test_lattice_certificate_catalog(name):
    p = GrowthProblem.from_model(lattice_problems()[name])
    res = optimize_constant_fraction(p)
    assert np.all(res.pi >= 0) and res.pi.sum() <= 1 + 1e-12
    assert lattice_certificate(p, res) <= 1e-8
    assert res.projected_gradient < 1e-9


def test_crra_objective_reduces_to_mean_variance():
    # without jumps the CRRA certainty-equivalent rate is mu pi - gamma sigma^2 pi^2 / 2
    res = optimize_constant_fraction(problem(0.08, 0.2, gamma=4.0))
    assert res.pi[0] == pytest.approx(0.08 / (4 * 0.04), abs=1e-6)


def test_total_loss_jump_keeps_optimizer_off_the_boundary():
    p = problem(0.3, 0.2, 0.5, FixedJump(-1.0))
    res = optimize_constant_fraction(p)
    assert res.pi[0] < 1 and np.isfinite(res.value)
    assert lattice_certificate(p, res) <= 1e-8


def test_non_concave_signal():
    p = problem(0.08, 0.2)
    p.value = lambda pi: np.full(np.shape(pi)[:-1], np.nan) if np.ndim(pi) > 1 else -np.inf
    with pytest.raises(NonConcaveError):
        optimize_constant_fraction(p)


def test_lattice_size():
    assert simplex_lattice(2, 0.01).shape == (5151, 2)
    assert simplex_lattice(3, 0.1).shape == (286, 3)


# ---------------------------------------------------------------------------
# utility experiments


def config(model, ladder=(4, 16, 64), n_steps=256, n_paths=300, **kw):
    return UtilityConfig(model, TimeGrid(1.0, n_steps), kw.pop("utility", LogUtility()),
                         PartitionSequenceSpec("uniform", ladder), n_paths=n_paths, seed=12, **kw)


def test_gap_black_scholes():
    report = run_indirect_utility_gap(config(black_scholes_utility()))
    assert report.pi_star[0] == 1.0
    assert all(r.eu_ref == pytest.approx(0.06, abs=1e-15) for r in report.rows)
    # full investment: every level reproduces the continuous wealth exactly
    assert all(r.term_exceed == 0 for r in report.rows)
    last = report.rows[-1]
    assert abs(last.eu_simple - 0.06) < 3 * last.se


def test_gap_with_no_investment():
    report = run_indirect_utility_gap(config(ModelSpec.black_scholes(-0.02, 0.2, s0=1.0), x=2.0))
    assert report.pi_star[0] == 0
    assert all(r.eu_simple == math.log(2.0) for r in report.rows)


def test_gap_on_fine_ladder():
    report = run_indirect_utility_gap(config(merton_utility(), ladder=(256,)))
    assert abs(report.rows[0].eu_simple - report.eu_continuous[0]) < 1e-12


def test_simple_does_not_beat_continuous():
    report = run_indirect_utility_gap(config(merton_utility()))
    eu_c, se_c, _ = report.eu_continuous
    for r in report.rows:
        assert r.eu_simple <= eu_c + 3 * math.hypot(r.se, se_c)


def test_terminal_and_uniform_decrease():
    report = run_terminal_convergence(config(merton_utility()))
    term = [r.term_exceed for r in report.rows]
    unif = [r.unif_exceed for r in report.rows]
    assert term[0] > term[-1] and unif[0] > unif[-1]
    assert abs(report.weights_sum - 1.0) < 1e-12
    assert np.all(LogUtility().wealth_times_marginal(np.array([0.3, 1.0, 7.0])) == 1.0)
    assert report.km_rows and all(r[4] <= r[5] + 1e-12 for r in report.km_rows)
    assert report.to_csv().splitlines()[0] == "level,mesh,eu_simple,se,eu_ref,gap,term_exceed,unif_exceed,ci_lo,ci_hi"


def test_identical_sequences_have_no_exceedance():
    report = run_uniform_convergence(config(merton_utility(), ladder=(256,)))
    assert report.rows[0].term_exceed == 0 and report.rows[0].unif_exceed == 0


def test_large_epsilon_has_no_exceedance():
    report = run_terminal_convergence(config(merton_utility(), epsilon=10.0))
    assert all(r.term_exceed == 0 for r in report.rows)


def test_crra_weights_normalised():
    cfg = config(black_scholes_utility(), utility=CRRAUtility(2.0))
    report = run_uniform_convergence(cfg)
    assert report.pi_star[0] == pytest.approx(1.0, abs=1e-6)
    assert abs(report.weights_sum - 1.0) < 1e-12


def test_fixed_strategy_is_used():
    cfg = config(merton_utility(), strategy=ConstantFraction(pi=(0.3,)))
    report = run_terminal_convergence(cfg)
    assert report.pi_star[0] == 0.3


def test_workers_do_not_change_reports():
    ref = run_terminal_convergence(config(merton_utility(), n_paths=120, chunk_size=120))
    for workers in (1, 4):
        rep = run_terminal_convergence(config(merton_utility(), n_paths=120, chunk_size=17, workers=workers))
        assert rep.to_csv() == ref.to_csv() and rep.km_csv() == ref.km_csv()


# ---------------------------------------------------------------------------
# supermartingale harness


def test_degenerate_family_is_constant():
    rep = supermartingale_convergence_check(SupermartingaleFamily((0.0, 0.0)), 50, seed=1)
    assert all(r[5] == 0 and r[6] == 0 for r in rep.rows)


def test_sigma_ladder_converges_and_control_does_not():
    sigmas = tuple(2.0**-k for k in range(1, 7))
    rep = supermartingale_convergence_check(SupermartingaleFamily(sigmas), 2000, seed=3)
    p_sup = [r[6] for r in rep.rows]
    assert p_sup[0] > 0.5 and p_sup[-1] < 0.05
    assert all(rep.mean_monotone)
    ctrl = supermartingale_convergence_check(SupermartingaleFamily((0.5,) * 6, name="control"), 2000, seed=3)
    assert min(r[6] for r in ctrl.rows) > 0.5


def test_drifted_family_is_supermartingale():
    fam = SupermartingaleFamily((0.4, 0.1, 0.02), drifts=(0.5, 0.1, 0.01), name="drifted")
    rep = supermartingale_convergence_check(fam, 1000, seed=5)
    assert all(rep.mean_monotone)
    assert rep.uniform[-1].p_hat < rep.uniform[0].p_hat


def test_family_validation():
    w = brownian_paths(3, 8, 1.0, seed=0)
    with pytest.raises(ValueError):
        SupermartingaleFamily((0.1,), drifts=(-0.1,), n_steps=8).paths(w)
    with pytest.raises(ValueError):
        supermartingale_convergence_check(SupermartingaleFamily((0.1,)), 1, seed=0)


def test_brownian_increments():
    w = brownian_paths(4000, 16, 2.0, seed=9)
    assert np.all(w[:, 0] == 0)
    assert abs(np.var(w[:, -1]) - 2.0) < 0.15
    np.testing.assert_array_equal(brownian_paths(3, 16, 2.0, seed=9, first_path=5), w[5:8])
