"""Fraction strategies, wealth engines and the no-short-sales checker.

Three engines are provided:

* :func:`wealth_continuous` compounds ``1 + <pi_k, dR_{k+1}>`` on every fine step,
  the grid stochastic exponential of the fraction-weighted return integral.
* :func:`wealth_multiplicative` rebalances to the target fractions only at the
  dates of a :class:`Partition` and holds units constant in between.
* :func:`wealth_additive_units` evaluates ``x + sum <theta, dS>`` for an
  arbitrary unit schedule and deliberately does not enforce the constraint.

Array conventions: prices ``(P, N + 1, d)``, fraction and unit tables
``(P, N, d)`` where row ``k`` applies to the step ``k -> k + 1``, wealth
``(P, N + 1)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from .market import AssetPaths, ReturnIncrements, TimeGrid

SIMPLEX_TOL = 1e-12

logger = logging.getLogger(__name__)


class ConstraintViolation(ValueError):
    """Units or fractions that break the no-short-sales constraint."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or []


class AbsorptionError(ValueError):
    """A constrained wealth path left zero after going bankrupt."""


def in_simplex(z, tol: float = SIMPLEX_TOL) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.all(z >= -tol, axis=-1) & (z.sum(axis=-1) <= 1.0 + tol)


def project_capped_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{z >= 0, sum z <= 1}``."""
    z = np.maximum(y, 0.0)
    if z.sum() <= 1.0:
        return z
    # active budget: project onto the probability simplex by sorting
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.flatnonzero(u - css / np.arange(1, y.size + 1) > 0)[-1]
    return np.maximum(y - css[rho] / (rho + 1.0), 0.0)


# ---------------------------------------------------------------------------
# strategies


@dataclass(frozen=True)
class FractionStrategy:
    """Base class. ``scale`` multiplies every output; ``scale = 1 - eps``."""

    scale: float = 1.0

    def raw_table(self, paths: AssetPaths) -> np.ndarray:
        raise NotImplementedError

    def scaled(self, eps: float) -> "FractionStrategy":
        if not 0 <= eps < 1:
            raise ValueError(f"eps must lie in [0, 1), got {eps}")
        return replace(self, scale=self.scale * (1.0 - eps))

    def table(self, paths: AssetPaths) -> np.ndarray:
        """Fractions for every path and step, masked to zero on bankrupt assets."""
        raw = np.broadcast_to(self.raw_table(paths),
                              (paths.n_paths, paths.grid.n_steps, paths.d))
        if not np.all(in_simplex(raw)):
            raise ConstraintViolation(f"{type(self).__name__} produced a value outside the simplex")
        alive = paths.values[:, :-1, :] > 0
        return np.where(alive, self.scale * raw, 0.0)


@dataclass(frozen=True)
class ConstantFraction(FractionStrategy):
    pi: tuple = (0.0,)

    def __post_init__(self):
        if not in_simplex(np.asarray(self.pi, dtype=float)):
            raise ConstraintViolation(f"constant fraction {self.pi} is outside the simplex")

    def raw_table(self, paths):
        pi = np.asarray(self.pi, dtype=float)
        if pi.shape != (paths.d,):
            raise ValueError(f"fraction vector has {pi.size} entries for {paths.d} assets")
        return pi[None, None, :]


@dataclass(frozen=True, eq=False)
class TableLookup(FractionStrategy):
    """Fractions given explicitly, shape ``(N, d)`` or ``(P, N, d)``."""

    values: np.ndarray = None

    def raw_table(self, paths):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[None]
        if v.shape[1:] != (paths.grid.n_steps, paths.d) or v.shape[0] not in (1, paths.n_paths):
            raise ValueError(f"table of shape {v.shape} does not fit the paths")
        return v


@dataclass(frozen=True, eq=False)
class Callback(FractionStrategy):
    """``rule(k, t_k, history)`` returns ``(P, d)`` fractions for the step ``k -> k + 1``.

    ``history`` is the price array restricted to indices ``0..k``, which keeps
    the rule adapted by construction.
    """

    rule: Callable = None

    def raw_table(self, paths):
        times = paths.grid.times
        out = np.empty((paths.n_paths, paths.grid.n_steps, paths.d))
        for k in range(paths.grid.n_steps):
            out[:, k, :] = self.rule(k, times[k], paths.values[:, : k + 1, :])
        return out


def ramp_strategy(cap: float = 0.9, horizon: float = 1.0, d: int = 1) -> Callback:
    """``pi_t = min(t / horizon, cap)`` in every asset (split evenly when d > 1)."""

    def rule(k, t, history):
        return np.full((history.shape[0], d), min(t / horizon, cap) / d)

    return Callback(rule=rule)


# ---------------------------------------------------------------------------
# partitions and unit schedules


@dataclass(eq=False)
class Partition:
    """Per-path rebalancing dates as a boolean mask over fine-grid indices."""

    mask: np.ndarray
    tag: str = "custom"

    def __post_init__(self):
        self.mask = np.atleast_2d(np.asarray(self.mask, dtype=bool))
        if not (self.mask[:, 0].all() and self.mask[:, -1].all()):
            raise ValueError("partition must contain the first and the last grid index")

    @classmethod
    def from_indices(cls, indices, n_steps: int, n_paths: int = 1, tag: str = "custom"):
        idx = np.asarray(sorted(set(int(i) for i in indices)))
        if idx[0] != 0 or idx[-1] != n_steps:
            raise ValueError(f"partition indices must start at 0 and end at {n_steps}")
        mask = np.zeros((n_paths, n_steps + 1), dtype=bool)
        mask[:, idx] = True
        return cls(mask, tag)

    @classmethod
    def fine(cls, n_steps: int, n_paths: int = 1):
        return cls(np.ones((n_paths, n_steps + 1), dtype=bool), "fine")

    def for_paths(self, n_paths: int) -> np.ndarray:
        if self.mask.shape[0] == n_paths:
            return self.mask
        if self.mask.shape[0] == 1:
            return np.broadcast_to(self.mask, (n_paths, self.mask.shape[1]))
        raise ValueError("partition does not match the number of paths")

    def indices(self, path: int = 0) -> np.ndarray:
        return np.flatnonzero(self.mask[min(path, self.mask.shape[0] - 1)])

    def anchors(self, n_paths: int) -> np.ndarray:
        """``a[p, k]``: last rebalancing index strictly before ``k`` (``a[:, 0] = 0``)."""
        mask = self.for_paths(n_paths)
        n1 = mask.shape[1]
        idx = np.where(mask, np.arange(n1)[None, :], 0)
        last_at_or_before = np.maximum.accumulate(idx, axis=1)
        out = np.zeros_like(last_at_or_before)
        out[:, 1:] = last_at_or_before[:, :-1]
        return out

    def mesh(self, grid: TimeGrid) -> np.ndarray:
        """Largest gap between consecutive dates, per path, in time units."""
        n = self.mask.shape[1] - 1
        a = self.anchors(self.mask.shape[0])
        # gap ending at each rebalancing index k is k - anchor(k)
        span = np.where(self.mask[:, 1:], np.arange(1, n + 1)[None, :] - a[:, 1:], 0)
        return span.max(axis=1) * grid.dt


@dataclass(eq=False)
class UnitSchedule:
    """Units ``(P, N, d)`` held over each fine step, piecewise constant between rebalancing dates."""

    units: np.ndarray
    rebalance: np.ndarray
    no_short_sales: bool = False


@dataclass(eq=False)
class WealthPaths:
    grid: TimeGrid
    values: np.ndarray
    engine: str
    units: UnitSchedule | None = None
    constrained: bool = True

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    @property
    def bankruptcy_index(self) -> list:
        return bankruptcy_index(self, validate=False)


# ---------------------------------------------------------------------------
# conversions


def units_from_fractions(pi, s_minus, x_minus) -> np.ndarray:
    """Units ``theta^i = pi^i X_- / S^i_-`` that put fraction ``pi^i`` of wealth in asset ``i``."""
    pi = np.asarray(pi, dtype=float)
    s_minus = np.asarray(s_minus, dtype=float)
    if np.any(x_minus < 0):
        raise ValueError("wealth must be nonnegative")
    if np.any((pi > 0) & (s_minus <= 0)):
        raise ConstraintViolation("positive fraction in a bankrupt asset")
    return np.divide(pi * np.asarray(x_minus, dtype=float)[..., None], s_minus,
                     out=np.zeros(np.broadcast_shapes(pi.shape, s_minus.shape)),
                     where=s_minus > 0)


def fractions_from_units(theta, s_minus, x_minus, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Fractions ``pi^i = theta^i S^i_- / X_-``; raises with a report if the constraint fails."""
    theta = np.asarray(theta, dtype=float)
    x_minus = np.asarray(x_minus, dtype=float)
    if np.any(x_minus <= 0):
        raise ValueError("fractions need strictly positive wealth")
    position = theta * np.asarray(s_minus, dtype=float)
    report = []
    if np.any(theta < 0):
        report.append(("negative-units", np.argwhere(np.atleast_1d(theta < 0)).tolist()))
    cost = position.sum(axis=-1)
    if np.any(cost > x_minus * (1.0 + tol)):
        excess = np.max(cost - x_minus)
        report.append(("baseline-short", float(excess)))
    if report:
        raise ConstraintViolation(
            "no-short-sales constraint violated: "
            + "; ".join(f"{kind} {detail}" for kind, detail in report), report)
    return position / x_minus[..., None]


# ---------------------------------------------------------------------------
# engines


def _gross(later: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    # S_t / S_a, set to 1 (no move) when S_a = 0, matching the zero-ratio convention
    return np.divide(later, anchor, out=np.ones_like(later), where=anchor > 0)


def _growth_factor(pi: np.ndarray, gross: np.ndarray) -> np.ndarray:
    # shared by both fraction engines so the finest partition reproduces the continuous engine bit-for-bit;
    # (1 - sum pi) + <pi, gross> equals 1 + <pi, relative return> without the cancellation near total loss
    factor = np.maximum((1.0 - np.sum(pi, axis=-1)) + np.sum(pi * gross, axis=-1), 0.0)
    hits = np.count_nonzero(factor == 0.0)
    if hits:
        # boundary case <pi, dR> = -1: wealth is wiped out and stays absorbed
        logger.info("fraction-weighted return of exactly -1 on %d step(s); bankruptcy applied", hits)
    return factor


def wealth_continuous(x: float, strategy: FractionStrategy, returns: ReturnIncrements) -> WealthPaths:
    """``X_{k+1} = X_k (1 + <pi_k, dR_{k+1}>)`` on the fine grid.

    Gross returns are read off the underlying prices, which is the same
    quantity as ``1 + dR`` but keeps full relative precision after jumps close to -1.
    """
    paths = returns.paths
    pi = strategy.table(paths)
    factors = _growth_factor(pi, _gross(paths.values[:, 1:, :], paths.values[:, :-1, :]))
    values = np.empty((paths.n_paths, paths.grid.n_steps + 1))
    values[:, 0] = 1.0
    np.cumprod(factors, axis=1, out=values[:, 1:])
    return WealthPaths(paths.grid, x * values, "continuous")


def wealth_multiplicative(x: float, strategy: FractionStrategy, partition: Partition,
                          paths: AssetPaths) -> WealthPaths:
    """Buy-and-hold between rebalancing dates, re-targeting fractions at each date.

    On ``(tau_{j-1}, tau_j]`` the wealth is ``X_{tau_{j-1}} (1 + sum_i pi^i (S^i_t - S^i_a) / S^i_a)``
    with ``a = tau_{j-1}`` and the ratio set to 0 when ``S^i_a = 0``. The implied
    units are returned in ``WealthPaths.units``.
    """
    n_paths, n = paths.n_paths, paths.grid.n_steps
    pi = strategy.table(paths)
    anchor = partition.anchors(n_paths)[:, 1:]
    s_anchor = np.take_along_axis(paths.values, anchor[:, :, None], axis=1)
    pi_anchor = np.take_along_axis(pi, anchor[:, :, None], axis=1)
    ratio = _growth_factor(pi_anchor, _gross(paths.values[:, 1:, :], s_anchor))

    # cumulative product of the interval factors, closed only at rebalancing dates
    closing = np.where(partition.for_paths(n_paths)[:, 1:], ratio, 1.0)
    at_dates = np.empty((n_paths, n + 1))
    at_dates[:, 0] = 1.0
    np.cumprod(closing, axis=1, out=at_dates[:, 1:])
    rel_wealth = np.take_along_axis(at_dates, anchor, axis=1) * ratio
    values = np.empty((n_paths, n + 1))
    values[:, 0] = 1.0
    values[:, 1:] = rel_wealth
    values *= x

    x_anchor = np.take_along_axis(values, anchor, axis=1)
    units = np.divide(pi_anchor * x_anchor[:, :, None], s_anchor,
                      out=np.zeros_like(pi_anchor), where=s_anchor > 0)
    schedule = UnitSchedule(units, partition.for_paths(n_paths), no_short_sales=True)
    return WealthPaths(paths.grid, values, "multiplicative", schedule)


def wealth_additive_units(x: float, schedule: UnitSchedule, paths: AssetPaths) -> WealthPaths:
    """``X_k = x + sum_{m < k} <theta_m, S_{m+1} - S_m>``; may turn negative.

    Evaluated in the equivalent cash-plus-position form: the cash account
    ``X_m - <theta_m, S_m>`` only changes when the units do.
    """
    units = np.asarray(schedule.units, dtype=float)
    s = paths.values
    values = np.empty((paths.n_paths, paths.grid.n_steps + 1))
    values[:, 0] = x
    held = np.zeros_like(units[:, 0, :])
    cash = np.full(paths.n_paths, float(x))
    for k in range(paths.grid.n_steps):
        change = np.any(units[:, k, :] != held, axis=1)
        if k == 0 or change.any():
            held = units[:, k, :]
            cash = np.where(change | (k == 0), values[:, k] - np.sum(held * s[:, k, :], axis=1), cash)
        values[:, k + 1] = cash + np.sum(held * s[:, k + 1, :], axis=1)
    return WealthPaths(paths.grid, values, "additive", schedule, constrained=False)


def first_negative_index(wealth: WealthPaths) -> list:
    out = []
    for row in wealth.values:
        neg = np.flatnonzero(row < 0)
        out.append(int(neg[0]) if neg.size else None)
    return out


def target_tracking_schedule(x: float, strategy: FractionStrategy, partition: Partition,
                             paths: AssetPaths) -> UnitSchedule:
    """Units fixed at each rebalancing date from the continuous target: ``theta = pi X_hat / S``.

    This is the classical additive discretisation; nothing stops the position
    from costing more than the wealth actually accumulated by the schedule.
    """
    from .market import returns_from_prices

    target = wealth_continuous(x, strategy, returns_from_prices(paths))
    pi = strategy.table(paths)
    anchor = partition.anchors(paths.n_paths)[:, 1:]
    s_anchor = np.take_along_axis(paths.values, anchor[:, :, None], axis=1)
    pi_anchor = np.take_along_axis(pi, anchor[:, :, None], axis=1)
    x_anchor = np.take_along_axis(target.values, anchor, axis=1)
    units = np.divide(pi_anchor * x_anchor[:, :, None], s_anchor,
                      out=np.zeros_like(pi_anchor), where=s_anchor > 0)
    return UnitSchedule(units, partition.for_paths(paths.n_paths), no_short_sales=False)


class Violation(NamedTuple):
    path: int
    index: int
    kind: str


def check_no_short_sales(schedule: UnitSchedule, paths: AssetPaths, wealth: WealthPaths,
                         rtol: float = 1e-12) -> list[Violation]:
    """All ``(path, k, kind)`` where the units held on step ``k -> k + 1`` break the constraint.

    ``kind`` is ``"negative-units"`` or ``"baseline-short"`` (risky position
    costs more than the wealth at ``k``).
    """
    units = np.asarray(schedule.units)
    if units.shape[:2] != (paths.n_paths, paths.grid.n_steps) or wealth.values.shape != \
            (paths.n_paths, paths.grid.n_steps + 1):
        raise ValueError("schedule, paths and wealth are not aligned")
    s_minus = paths.values[:, :-1, :]
    x_minus = wealth.values[:, :-1]
    negative = np.any(units < 0, axis=-1)
    cost = np.sum(np.maximum(units, 0.0) * s_minus, axis=-1)
    short = cost > x_minus + rtol * np.maximum(np.abs(x_minus), cost)
    out = [Violation(int(p), int(k), "negative-units") for p, k in np.argwhere(negative)]
    out += [Violation(int(p), int(k), "baseline-short") for p, k in np.argwhere(short)]
    return sorted(out)


def epsilon_shift(wealth: WealthPaths, x: float, eps: float) -> WealthPaths:
    """``eps + (1 - eps / x) X``: same initial wealth, bounded below by ``eps``.

    Units, when present, are scaled by ``1 - eps / x``; the extra ``eps`` sits
    in the baseline asset, so the shifted process stays attainable.
    """
    if not 0 < eps < x:
        raise ValueError(f"eps must lie in (0, {x}), got {eps}")
    keep = 1.0 - eps / x
    units = None
    if wealth.units is not None:
        units = replace(wealth.units, units=keep * np.asarray(wealth.units.units))
    return WealthPaths(wealth.grid, eps + keep * wealth.values, wealth.engine + "+shift",
                       units, wealth.constrained)


def bankruptcy_index(wealth: WealthPaths, validate: bool = True) -> list:
    """First grid index where wealth is zero, ``None`` if it never is.

    With ``validate`` set, a constrained path that becomes nonzero again after
    its bankruptcy index raises :class:`AbsorptionError`.
    """
    values = np.asarray(wealth.values)
    out = []
    for p, row in enumerate(values):
        zero = np.flatnonzero(row == 0)
        if not zero.size:
            out.append(None)
            continue
        k = int(zero[0])
        if validate and wealth.constrained and np.any(row[k:] != 0):
            revived = k + int(np.flatnonzero(row[k:] != 0)[0])
            raise AbsorptionError(f"path {p} is bankrupt at index {k} but revives at index {revived}")
        out.append(k)
    return out
