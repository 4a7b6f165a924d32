"""Utility functions, constant-fraction growth optimisation and the utility experiments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._mc import DEFAULT_CHUNK, csv_text, run_chunked
from .convergence import (
    WILSON_Z,
    PartitionSequenceSpec,
    build_partition,
    estimate_exceedance,
)
from .market import ModelSpec, TimeGrid, path_generator, returns_from_prices, simulate
from .portfolio import (
    ConstantFraction,
    FractionStrategy,
    project_capped_simplex,
    wealth_continuous,
    wealth_multiplicative,
)

UTILITY_HEADER = ("level", "mesh", "eu_simple", "se", "eu_ref", "gap", "term_exceed",
                  "unif_exceed", "ci_lo", "ci_hi")
KM_HEADER = ("level", "m", "beta_m", "p_km", "beta_p", "mid_gap", "bound")
SUPERMART_HEADER = ("family", "level", "sigma", "drift", "epsilon", "p_terminal", "p_sup",
                    "ci_lo", "ci_hi", "n_paths", "mean_monotone")


class NonConcaveError(RuntimeError):
    """The line search could not make progress away from a stationary point."""


# ---------------------------------------------------------------------------
# utility functions


class UtilityFn:
    strict = True

    def __call__(self, w):
        return evaluate_utility(self, w)

    def _value(self, w):
        raise NotImplementedError

    def at_zero(self) -> float:
        raise NotImplementedError

    def derivative(self, w):
        raise NotImplementedError

    def wealth_times_marginal(self, w):
        """``w * U'(w)``, the unnormalised density of the dual measure."""
        w = np.asarray(w, dtype=float)
        return w * self.derivative(w)


@dataclass(frozen=True)
class LogUtility(UtilityFn):
    def _value(self, w):
        return np.log(w)

    def at_zero(self):
        return -np.inf

    def derivative(self, w):
        return 1.0 / np.asarray(w, dtype=float)

    def wealth_times_marginal(self, w):
        return np.ones_like(np.asarray(w, dtype=float))


@dataclass(frozen=True)
class CRRAUtility(UtilityFn):
    """``(w**(1 - gamma) - 1) / (1 - gamma)``."""

    gamma: float

    def __post_init__(self):
        if not self.gamma > 0 or self.gamma == 1:
            raise ValueError(f"CRRA needs gamma > 0 and gamma != 1, got {self.gamma}")

    def _value(self, w):
        return np.expm1((1.0 - self.gamma) * np.log(w)) / (1.0 - self.gamma)

    def at_zero(self):
        return -np.inf if self.gamma > 1 else -1.0 / (1.0 - self.gamma)

    def derivative(self, w):
        return np.asarray(w, dtype=float) ** (-self.gamma)

    def wealth_times_marginal(self, w):
        return np.asarray(w, dtype=float) ** (1.0 - self.gamma)


@dataclass(frozen=True, eq=False)
class PiecewiseConcave(UtilityFn):
    """Linear interpolation through ``(knots, values)``; last slope continues to the right."""

    knots: tuple
    values: tuple
    strict = False

    def __post_init__(self):
        k, v = np.asarray(self.knots, float), np.asarray(self.values, float)
        if k.size < 2 or k[0] != 0 or np.any(np.diff(k) <= 0):
            raise ValueError("knots must start at 0 and increase")
        slopes = np.diff(v) / np.diff(k)
        if np.any(slopes < 0) or np.any(np.diff(slopes) > 0):
            raise ValueError("table is not increasing and concave")

    def _slopes(self):
        k, v = np.asarray(self.knots, float), np.asarray(self.values, float)
        return k, v, np.diff(v) / np.diff(k)

    def _value(self, w):
        k, v, s = self._slopes()
        w = np.asarray(w, dtype=float)
        inside = np.interp(w, k, v)
        return np.where(w > k[-1], v[-1] + s[-1] * (w - k[-1]), inside)

    def at_zero(self):
        return float(self.values[0])

    def derivative(self, w):
        k, _, s = self._slopes()
        i = np.clip(np.searchsorted(k, np.asarray(w, dtype=float), side="right") - 1, 0, s.size - 1)
        return s[i]


def evaluate_utility(U: UtilityFn, w):
    """``U(w)`` with ``U(0)`` the right limit (possibly ``-inf``)."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("utility is only defined for nonnegative wealth")
    with np.errstate(divide="ignore"):
        out = np.where(w > 0, U._value(np.where(w > 0, w, 1.0)), U.at_zero())
    return out if out.ndim else float(out)


def expected_utility(terminal, U: UtilityFn) -> tuple[float, float, int]:
    """``(mean, standard error, number of -inf values)``; any ``-inf`` forces the mean to ``-inf``."""
    vals = np.atleast_1d(evaluate_utility(U, terminal))
    if vals.size < 2:
        raise ValueError("expected utility needs at least two paths")
    finite = vals[np.isfinite(vals)]
    hits = int(vals.size - finite.size)
    se = float(np.std(finite, ddof=1) / np.sqrt(finite.size)) if finite.size > 1 else 0.0
    mean = -np.inf if hits else float(np.mean(finite))
    return mean, se, hits


def concavity_gap(U: UtilityFn, a, b):
    """``U((a + b) / 2) - (U(a) + U(b)) / 2``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    with np.errstate(invalid="ignore"):
        return evaluate_utility(U, 0.5 * (a + b)) - 0.5 * (evaluate_utility(U, a) + evaluate_utility(U, b))


def strict_concavity_constant(U: UtilityFn, m: int, n_grid: int = 401) -> float:
    """Grid-search minimum of the concavity gap over ``K_m`` (``a, b`` in ``[0, m]``, ``|a - b| > 1/m``).

    ``K_1`` is empty (no two points of ``[0, 1]`` are more than 1 apart), and
    the infimum over an empty set is returned as ``inf``.
    """
    if m <= 1:
        return float("inf")
    g = np.linspace(0.0, m, n_grid)
    a, b = np.meshgrid(g, g, indexing="ij")
    keep = np.abs(a - b) > 1.0 / m
    gaps = concavity_gap(U, a[keep], b[keep])
    return float(np.min(gaps))


# ---------------------------------------------------------------------------
# growth problem


@dataclass(eq=False)
class GrowthProblem:
    """Maximise ``g(pi) = <pi, mu> - gamma/2 <pi, cov pi> + sum_i lambda_i E[phi(pi_i J)]`` over the simplex.

    ``phi`` is ``log(1 + y)`` for ``gamma = 1`` (log utility), otherwise
    ``((1 + y)**(1 - gamma) - 1) / (1 - gamma)``, the certainty-equivalent rate of
    a CRRA investor holding constant fractions.
    """

    mu: np.ndarray
    cov: np.ndarray
    intensity: np.ndarray
    jump_nodes: np.ndarray
    jump_weights: np.ndarray
    gamma: float = 1.0

    @classmethod
    def from_model(cls, model: ModelSpec, gamma: float = 1.0) -> "GrowthProblem":
        cov = np.outer(model.sigma, model.sigma) * model.corr
        if model.jump_law is None:
            nodes, weights = np.zeros(1), np.ones(1)
        else:
            nodes, weights = model.jump_law.quadrature()
        return cls(model.mu.copy(), cov, model.intensity.copy(), nodes, weights, gamma)

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    def _phi(self, y):
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.gamma == 1.0:
                return np.log1p(y)
            return np.expm1((1.0 - self.gamma) * np.log1p(y)) / (1.0 - self.gamma)

    def _dphi(self, y):
        with np.errstate(divide="ignore"):
            return (1.0 + y) ** (-self.gamma)

    def value(self, pi) -> np.ndarray:
        pi = np.asarray(pi, dtype=float)
        lin = pi @ self.mu
        quad = np.einsum("...i,ij,...j->...", pi, self.cov, pi)
        y = pi[..., :, None] * self.jump_nodes
        jump = np.sum(self._phi(y) @ self.jump_weights * self.intensity, axis=-1)
        out = lin - 0.5 * self.gamma * quad + jump
        return np.where(np.isnan(out), -np.inf, out)

    def gradient(self, pi) -> np.ndarray:
        pi = np.asarray(pi, dtype=float)
        y = pi[:, None] * self.jump_nodes
        jump = self.intensity * ((self._dphi(y) * self.jump_nodes) @ self.jump_weights)
        return self.mu - self.gamma * self.cov @ pi + jump


@dataclass
class OptimizerResult:
    pi: np.ndarray
    value: float
    iterations: int
    projected_gradient: float


def project_simplex_point(y) -> np.ndarray:
    return project_capped_simplex(np.asarray(y, dtype=float))


def optimize_constant_fraction(problem: GrowthProblem, tol: float = 1e-9,
                               max_iter: int = 10_000) -> OptimizerResult:
    """Projected gradient ascent on the simplex with Armijo backtracking."""
    d = problem.d
    pi = np.full(d, 0.5 / d)
    if not np.isfinite(problem.value(pi)):
        pi = np.zeros(d)
    g_pi = float(problem.value(pi))
    step = 1.0
    pg_norm = np.inf
    for it in range(1, max_iter + 1):
        grad = problem.gradient(pi)
        pg_norm = float(np.linalg.norm(project_simplex_point(pi + grad) - pi))
        if pg_norm < tol:
            return OptimizerResult(pi, g_pi, it, pg_norm)
        step *= 2.0
        while True:
            cand = project_simplex_point(pi + step * grad)
            g_cand = float(problem.value(cand))
            if np.isfinite(g_cand):
                move = cand - pi
                if g_cand >= g_pi + 1e-4 * grad @ move:
                    break
                # value differences drown in round-off near the optimum; by concavity a
                # nonnegative slope at the end of the segment still guarantees ascent
                if problem.gradient(cand) @ move >= 0:
                    g_cand = max(g_cand, g_pi)
                    break
            step *= 0.5
            if step < 1e-30:
                raise NonConcaveError(
                    f"line search failed at pi={pi} (projected gradient {pg_norm:.3g}); "
                    "check the jump law")
        if np.array_equal(cand, pi):
            return OptimizerResult(pi, g_pi, it, pg_norm)
        pi, g_pi = cand, g_cand
    return OptimizerResult(pi, g_pi, max_iter, pg_norm)


def simplex_lattice(d: int, mesh: float = 0.01) -> np.ndarray:
    """All points of the grid ``mesh * Z^d`` inside the simplex."""
    n = int(round(1.0 / mesh))
    axes = np.meshgrid(*[np.arange(n + 1)] * d, indexing="ij")
    pts = np.stack([a.ravel() for a in axes], axis=1)
    pts = pts[pts.sum(axis=1) <= n]
    return pts / n


def lattice_certificate(problem: GrowthProblem, result: OptimizerResult, mesh: float = 0.01) -> float:
    """``max over the lattice of g(pi) - g(pi*)``; nonpositive up to round-off certifies the optimum."""
    lattice = simplex_lattice(problem.d, mesh)
    return float(np.max(problem.value(lattice)) - result.value)


# ---------------------------------------------------------------------------
# utility experiments


@dataclass
class UtilityConfig:
    model: ModelSpec
    grid: TimeGrid
    utility: UtilityFn
    partitions: PartitionSequenceSpec
    x: float = 1.0
    epsilon: float = 0.01
    n_paths: int = 1000
    seed: int = 0
    strategy: FractionStrategy | None = None
    chunk_size: int = DEFAULT_CHUNK
    workers: int = 1
    km_levels: tuple = (1, 2, 4)


@dataclass
class UtilityRow:
    level: object
    mesh: float
    eu_simple: float
    se: float
    eu_ref: float
    gap: float
    term_exceed: float
    unif_exceed: float
    ci_lo: float
    ci_hi: float

    def as_tuple(self):
        return (self.level, self.mesh, self.eu_simple, self.se, self.eu_ref, self.gap,
                self.term_exceed, self.unif_exceed, self.ci_lo, self.ci_hi)


@dataclass
class UtilityReport:
    rows: list = field(default_factory=list)
    km_rows: list = field(default_factory=list)
    pi_star: np.ndarray | None = None
    eu_continuous: tuple | None = None
    terminal: list = field(default_factory=list)
    uniform: list = field(default_factory=list)
    first_order_gap: list = field(default_factory=list)
    weights_sum: float = 1.0

    def to_csv(self) -> str:
        return csv_text(UTILITY_HEADER, [r.as_tuple() for r in self.rows])

    def km_csv(self) -> str:
        return csv_text(KM_HEADER, self.km_rows)


def optimal_strategy(config: UtilityConfig) -> tuple[FractionStrategy, np.ndarray, OptimizerResult | None]:
    if config.strategy is not None:
        pi = getattr(config.strategy, "pi", None)
        return config.strategy, None if pi is None else np.asarray(pi, float), None
    gamma = getattr(config.utility, "gamma", 1.0)
    res = optimize_constant_fraction(GrowthProblem.from_model(config.model, gamma))
    return ConstantFraction(pi=tuple(float(v) for v in res.pi)), res.pi, res


def _reference_utility(config, res, cont_terminal):
    closed_form = (isinstance(config.utility, LogUtility) and res is not None
                   and np.all(config.model.intensity == 0) and config.model.kind != "fixture")
    if closed_form:
        return float(np.log(config.x) + res.value * config.grid.horizon), 0.0
    mean, se, _ = expected_utility(cont_terminal, config.utility)
    return mean, se


def run_utility_experiment(config: UtilityConfig, primary: str = "terminal") -> UtilityReport:
    """Simple (rebalanced) near-optimal wealth against the continuous optimum, per ladder level.

    ``primary`` picks what the ``ci_lo, ci_hi`` columns describe: ``"gap"`` a
    normal interval for the simple expected utility, ``"terminal"`` or
    ``"uniform"`` the Wilson interval of that exceedance column.
    """
    if primary not in ("gap", "terminal", "uniform"):
        raise ValueError(f"unknown primary column {primary!r}")
    strategy, pi_star, res = optimal_strategy(config)
    spec, U, n_levels = config.partitions, config.utility, len(config.partitions)

    def block(first, count):
        paths = simulate(config.model, config.grid, count, config.seed, first_path=first)
        cont = wealth_continuous(config.x, strategy, returns_from_prices(paths))
        out = {"cont_T": cont.terminal, "levels": []}
        with np.errstate(divide="ignore", invalid="ignore"):
            for level in range(n_levels):
                part = build_partition(spec, level, paths)
                simple = wealth_multiplicative(config.x, strategy, part, paths)
                out["levels"].append({
                    "T": simple.terminal,
                    "sup_rel": np.max(np.abs(simple.values / cont.values - 1.0), axis=1),
                    "mesh": np.broadcast_to(part.mesh(config.grid), (count,)),
                })
        return out

    parts = run_chunked(block, config.n_paths, config.chunk_size, config.workers)
    cont_T = np.concatenate([p["cont_T"] for p in parts])
    report = UtilityReport(pi_star=pi_star, eu_continuous=expected_utility(cont_T, U))
    if np.any(cont_T <= 0):
        raise ValueError("continuous optimum hits zero; use an epsilon-shifted strategy")
    dens = U.wealth_times_marginal(cont_T)
    norm = float(np.mean(dens))
    if not np.isfinite(norm) or norm <= 0:
        raise ValueError("change of measure cannot be normalised: E[X U'(X)] is not finite")
    weights = dens / norm
    report.weights_sum = float(np.sum(weights / weights.size))
    eu_ref, _ = _reference_utility(config, res, cont_T)
    marginal = U.derivative(cont_T)
    eps = config.epsilon

    for level in range(n_levels):
        simple_T = np.concatenate([p["levels"][level]["T"] for p in parts])
        sup_rel = np.concatenate([p["levels"][level]["sup_rel"] for p in parts])
        mesh = float(np.mean(np.concatenate([p["levels"][level]["mesh"] for p in parts])))
        eu, se, _ = expected_utility(simple_T, U)
        term = estimate_exceedance(np.abs(simple_T - cont_T), eps * config.x)
        unif = estimate_exceedance(sup_rel, eps, weights=weights)
        report.terminal.append(term)
        report.uniform.append(unif)
        report.first_order_gap.append(float(np.mean(marginal * simple_T) - np.mean(marginal * cont_T)))
        if primary == "gap":
            lo, hi = eu - WILSON_Z * se, eu + WILSON_Z * se
        elif primary == "terminal":
            lo, hi = term.ci_lo, term.ci_hi
        else:
            lo, hi = unif.ci_lo, unif.ci_hi
        report.rows.append(UtilityRow(spec.ladder[level], mesh, eu, se, eu_ref, eu_ref - eu,
                                      term.p_hat, unif.p_hat, lo, hi))
        if primary == "terminal":
            eu_mid, _, _ = expected_utility(0.5 * (simple_T + cont_T), U)
            avg = 0.5 * (eu + report.eu_continuous[0])
            for m in config.km_levels:
                beta = strict_concavity_constant(U, m)
                in_km = ((simple_T <= m) & (cont_T <= m) & (np.abs(simple_T - cont_T) > 1.0 / m))
                p_km = float(np.mean(in_km))
                bound_term = beta * p_km if p_km > 0 else 0.0
                report.km_rows.append((spec.ladder[level], m, beta, p_km, bound_term,
                                       eu_mid - avg, eu_ref - avg))
    return report


def run_indirect_utility_gap(config: UtilityConfig) -> UtilityReport:
    return run_utility_experiment(config, "gap")


def run_terminal_convergence(config: UtilityConfig) -> UtilityReport:
    return run_utility_experiment(config, "terminal")


def run_uniform_convergence(config: UtilityConfig) -> UtilityReport:
    return run_utility_experiment(config, "uniform")


# ---------------------------------------------------------------------------
# supermartingale harness


@dataclass
class SupermartingaleFamily:
    """``Z^k_t = exp(sigma_k W_t - sigma_k**2 t / 2 - drift_k t)`` on a uniform grid."""

    sigmas: tuple
    drifts: tuple | None = None
    name: str = "exponential"
    horizon: float = 1.0
    n_steps: int = 256

    def drift_ladder(self):
        return tuple(self.drifts) if self.drifts is not None else (0.0,) * len(self.sigmas)

    def paths(self, brownian: np.ndarray) -> list[np.ndarray]:
        t = TimeGrid(self.horizon, self.n_steps).times
        out = []
        for s, a in zip(self.sigmas, self.drift_ladder()):
            if s < 0 or a < 0:
                raise ValueError("family needs sigma >= 0 and drift >= 0 (drift pulls down)")
            z = np.exp(s * brownian - (0.5 * s * s + a) * t)
            if np.any(z[:, 0] != 1.0) or np.any(z < 0):
                raise ValueError("family must start at 1 and stay nonnegative")
            out.append(z)
        return out


@dataclass
class SupermartingaleReport:
    family: str
    rows: list = field(default_factory=list)
    terminal: list = field(default_factory=list)
    uniform: list = field(default_factory=list)
    mean_monotone: list = field(default_factory=list)

    def to_csv(self) -> str:
        return csv_text(SUPERMART_HEADER, self.rows)


def brownian_paths(n_paths: int, n_steps: int, horizon: float, seed: int, first_path: int = 0):
    dt = horizon / n_steps
    w = np.zeros((n_paths, n_steps + 1))
    for j in range(n_paths):
        rng = path_generator(seed, first_path + j)
        w[j, 1:] = np.cumsum(rng.standard_normal(n_steps)) * np.sqrt(dt)
    return w


def _means_non_increasing(z: np.ndarray, checkpoints: int = 4, n_se: float = 3.0) -> bool:
    idx = np.unique(np.linspace(0, z.shape[1] - 1, checkpoints + 1).round().astype(int))
    for a, b in zip(idx, idx[1:]):
        diff = z[:, b] - z[:, a]
        se = np.std(diff, ddof=1) / np.sqrt(diff.size)
        if np.mean(diff) > n_se * se + 1e-15:
            return False
    return True


def supermartingale_convergence_check(family: SupermartingaleFamily, n_paths: int, seed: int,
                                      epsilon: float = 0.1, chunk_size: int = DEFAULT_CHUNK,
                                      workers: int = 1) -> SupermartingaleReport:
    """Terminal and running-supremum exceedance of ``|Z^k - 1|`` for each family member."""
    if n_paths < 2:
        raise ValueError("need at least two paths")

    def block(first, count):
        w = brownian_paths(count, family.n_steps, family.horizon, seed, first)
        return family.paths(w)

    parts = run_chunked(block, n_paths, chunk_size, workers)
    report = SupermartingaleReport(family.name)
    for k, (s, a) in enumerate(zip(family.sigmas, family.drift_ladder()), start=1):
        z = np.concatenate([p[k - 1] for p in parts])
        term = estimate_exceedance(np.abs(z[:, -1] - 1.0), epsilon)
        sup = estimate_exceedance(np.max(np.abs(z - 1.0), axis=1), epsilon)
        mono = _means_non_increasing(z)
        report.terminal.append(term)
        report.uniform.append(sup)
        report.mean_monotone.append(mono)
        report.rows.append((family.name, k, float(s), float(a), float(epsilon), term.p_hat,
                            sup.p_hat, sup.ci_lo, sup.ci_hi, n_paths, mono))
    return report
