"""Partition ladders, ucp-distance estimation and the approximation experiments."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._mc import DEFAULT_CHUNK, csv_text, run_chunked
from .market import AssetPaths, ModelSpec, TimeGrid, returns_from_prices, simulate
from .portfolio import (
    FractionStrategy,
    Partition,
    TableLookup,
    WealthPaths,
    wealth_continuous,
    wealth_multiplicative,
)

WILSON_Z = 1.959963984540054
PARTITION_KINDS = ("uniform", "dyadic", "price")
CONVERGENCE_HEADER = ("level", "mesh", "epsilon", "p_hat", "ci_lo", "ci_hi", "n_paths", "seconds")
RESIDUAL_HEADER = ("n_steps", "median_abs_residual", "ratio", "n_paths")


@dataclass(frozen=True)
class PartitionSequenceSpec:
    """``uniform``: n intervals; ``dyadic``: 2**k intervals; ``price``: move threshold delta."""

    kind: str
    ladder: tuple

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if not self.ladder:
            raise ValueError("partition ladder is empty")
        steps = np.diff(np.asarray(self.ladder, dtype=float))
        refining = steps < 0 if self.kind == "price" else steps > 0
        if not np.all(refining):
            raise ValueError(f"{self.kind} ladder {self.ladder} does not refine monotonically")
        if self.kind == "price" and min(self.ladder) <= 0:
            raise ValueError("price-trigger thresholds must be positive")
        if self.kind != "price" and any(int(v) != v or v < 0 for v in self.ladder):
            raise ValueError("uniform and dyadic ladders take nonnegative integers")

    def __len__(self):
        return len(self.ladder)


def uniform_indices(n_intervals: int, n_steps: int) -> np.ndarray:
    if not 1 <= n_intervals <= n_steps:
        raise ValueError(f"cannot split {n_steps} fine steps into {n_intervals} intervals")
    return np.unique(np.rint(np.arange(n_intervals + 1) * (n_steps / n_intervals)).astype(int))


def price_triggered_mask(paths: AssetPaths, delta: float) -> np.ndarray:
    """Rebalance at the first index where some live asset moved by ``delta`` relative to the last date."""
    values = paths.values
    n_paths, n1, _ = values.shape
    mask = np.zeros((n_paths, n1), dtype=bool)
    mask[:, 0] = True
    mask[:, -1] = True
    ref = values[:, 0, :].copy()
    for k in range(1, n1 - 1):
        s = values[:, k, :]
        move = np.divide(np.abs(s - ref), ref, out=np.zeros_like(s), where=ref > 0)
        hit = np.any(move >= delta, axis=1)
        mask[hit, k] = True
        ref[hit] = s[hit]
    return mask


def build_partition(spec: PartitionSequenceSpec, level: int, paths: AssetPaths) -> Partition:
    """Partition for ladder position ``level`` (0-based) on the grid of ``paths``."""
    n = paths.grid.n_steps
    value = spec.ladder[level]
    if spec.kind == "uniform":
        return Partition.from_indices(uniform_indices(int(value), n), n, tag=f"uniform({value})")
    if spec.kind == "dyadic":
        return Partition.from_indices(uniform_indices(2 ** int(value), n), n, tag=f"dyadic({value})")
    return Partition(price_triggered_mask(paths, float(value)), tag=f"price({value})")


def ucp_distance(X: WealthPaths, Y: WealthPaths) -> np.ndarray:
    """Per-path ``max_k |X_k - Y_k|``."""
    if X.grid != Y.grid or X.values.shape != Y.values.shape:
        raise ValueError("wealth paths live on different grids")
    return np.max(np.abs(X.values - Y.values), axis=1)


class Exceedance(NamedTuple):
    p_hat: float
    ci_lo: float
    ci_hi: float
    n: float


def wilson_interval(p_hat: float, n: float, z: float = WILSON_Z) -> tuple[float, float]:
    denom = 1.0 + z * z / n
    centre = (p_hat + z * z / (2 * n)) / denom
    half = z / denom * np.sqrt(p_hat * (1 - p_hat) / n + z * z / (4 * n * n))
    lo = 0.0 if p_hat == 0 else max(0.0, float(centre - half))
    hi = 1.0 if p_hat == 1 else min(1.0, float(centre + half))
    return lo, hi


def estimate_exceedance(distances, eps: float, weights=None) -> Exceedance:
    """Fraction of paths with distance above ``eps`` and its Wilson 95% interval.

    With ``weights`` (importance weights) the estimate is the weighted fraction
    and the interval uses the Kish effective sample size.
    """
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        raise ValueError("empty ensemble")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    hit = d > eps
    if weights is None:
        n = float(d.size)
        p = float(np.count_nonzero(hit)) / d.size
    else:
        w = np.asarray(weights, dtype=float)
        p = float(np.sum(w * hit) / np.sum(w))
        n = float(np.sum(w) ** 2 / np.sum(w * w))
    lo, hi = wilson_interval(p, n)
    return Exceedance(p, lo, hi, n)


def non_increasing_with_overlap(estimates) -> bool:
    """Each level's estimate may only rise if its interval overlaps the previous one."""
    for prev, cur in zip(estimates, estimates[1:]):
        if cur.p_hat > prev.p_hat and cur.ci_lo > prev.ci_hi:
            return False
    return True


# ---------------------------------------------------------------------------
# reports


@dataclass
class ConvergenceRow:
    level: object
    mesh: float
    epsilon: float
    p_hat: float
    ci_lo: float
    ci_hi: float
    n_paths: int
    seconds: float | None = None

    def as_tuple(self):
        return (self.level, self.mesh, self.epsilon, self.p_hat, self.ci_lo, self.ci_hi,
                self.n_paths, self.seconds)


@dataclass
class ConvergenceReport:
    rows: list = field(default_factory=list)
    distances: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        return csv_text(CONVERGENCE_HEADER, [r.as_tuple() for r in self.rows])

    def for_epsilon(self, eps: float) -> list:
        return [r for r in self.rows if np.isclose(r.epsilon, eps)]


@dataclass
class ConvergenceConfig:
    model: ModelSpec
    grid: TimeGrid
    strategy: FractionStrategy
    partitions: PartitionSequenceSpec
    epsilons: tuple = (0.05, 0.01, 0.002)  # relative to x
    x: float = 1.0
    n_paths: int = 1000
    seed: int = 0
    chunk_size: int = DEFAULT_CHUNK
    workers: int = 1
    timing: bool = False


def _rows(config, levels, meshes, distances, seconds) -> ConvergenceReport:
    report = ConvergenceReport(distances=dict(zip(levels, distances)))
    for level, mesh, dist, secs in zip(levels, meshes, distances, seconds):
        for eps in config.epsilons:
            est = estimate_exceedance(dist, eps * config.x)
            report.rows.append(ConvergenceRow(level, float(mesh), float(eps * config.x), est.p_hat,
                                              est.ci_lo, est.ci_hi, int(dist.size),
                                              secs if config.timing else None))
    return report


def run_multiplicative_convergence(config: ConvergenceConfig) -> ConvergenceReport:
    """Compare the rebalanced wealth on each ladder level to continuous trading on shared paths."""
    spec = config.partitions
    n_levels = len(spec)

    def block(first, count):
        paths = simulate(config.model, config.grid, count, config.seed, first_path=first)
        target = wealth_continuous(config.x, config.strategy, returns_from_prices(paths))
        dist, mesh, secs = [], [], []
        for level in range(n_levels):
            t0 = time.perf_counter()
            part = build_partition(spec, level, paths)
            approx = wealth_multiplicative(config.x, config.strategy, part, paths)
            dist.append(ucp_distance(approx, target))
            mesh.append(np.broadcast_to(part.mesh(config.grid), (count,)))
            secs.append(time.perf_counter() - t0)
        return dist, mesh, secs

    parts = run_chunked(block, config.n_paths, config.chunk_size, config.workers)
    distances = [np.concatenate([p[0][lv] for p in parts]) for lv in range(n_levels)]
    meshes = [float(np.mean(np.concatenate([p[1][lv] for p in parts]))) for lv in range(n_levels)]
    seconds = [sum(p[2][lv] for p in parts) for lv in range(n_levels)]
    return _rows(config, list(spec.ladder), meshes, distances, seconds)


# ---------------------------------------------------------------------------
# log-ratio decomposition


@dataclass
class ResidualDecomposition:
    """Terminal-time terms of the log-ratio identity, one entry per path."""

    lhs: np.ndarray           # log of rebalanced over continuous wealth
    interval_logs: np.ndarray  # sum over intervals of log(1 + eta * interval price change)
    integral: np.ndarray      # grid integral of eta against S
    half_qv: np.ndarray       # half the realised quadratic variation of the continuous part
    jump_term: np.ndarray     # sum over jump steps of (eta dS - log(1 + eta dS))

    @property
    def rhs(self) -> np.ndarray:
        return self.interval_logs - (self.integral - self.half_qv - self.jump_term)

    @property
    def residual(self) -> np.ndarray:
        return self.lhs - self.rhs


def log_ratio_residual(x: float, strategy: FractionStrategy, partition: Partition,
                       paths: AssetPaths) -> ResidualDecomposition:
    """Evaluate both sides of the log-ratio identity with ``eta = pi / S_-``.

    The continuous/jump split of each increment comes from the simulator's jump
    marks. With one asset, the only nonzero contribution to the residual is
    ``sum over diffusive steps of log(1 + y) - y + y**2 / 2``, which is O(dt).
    """
    n_paths = paths.n_paths
    rebal = wealth_multiplicative(x, strategy, partition, paths)
    cont = wealth_continuous(x, strategy, returns_from_prices(paths))
    if np.any(rebal.terminal <= 0) or np.any(cont.terminal <= 0):
        raise ValueError("log-ratio decomposition needs strictly positive wealth; scale the strategy")

    pi = strategy.table(paths)
    s_minus = paths.values[:, :-1, :]
    eta = np.divide(pi, s_minus, out=np.zeros_like(pi), where=s_minus > 0)
    dS = np.diff(paths.values, axis=1)
    marks = paths.jump_mark[:, 1:, :]
    y_all = eta * dS
    y_cont = np.sum(np.where(marks, 0.0, y_all), axis=-1)
    y_jump = np.sum(np.where(marks, y_all, 0.0), axis=-1)

    anchor = partition.anchors(n_paths)[:, 1:]
    s_anchor = np.take_along_axis(paths.values, anchor[:, :, None], axis=1)
    eta_anchor = np.take_along_axis(eta, anchor[:, :, None], axis=1)
    interval = 1.0 + np.sum(eta_anchor * (paths.values[:, 1:, :] - s_anchor), axis=-1)
    closes = partition.for_paths(n_paths)[:, 1:]

    return ResidualDecomposition(
        lhs=np.log(rebal.terminal) - np.log(cont.terminal),
        interval_logs=np.sum(np.where(closes, np.log(np.where(closes, interval, 1.0)), 0.0), axis=1),
        integral=np.sum(y_all.sum(axis=-1), axis=1),
        half_qv=0.5 * np.sum(y_cont**2, axis=1),
        jump_term=np.sum(y_jump - np.log1p(y_jump), axis=1),
    )


@dataclass
class ResidualConfig:
    model: ModelSpec
    horizon: float
    n_steps_ladder: tuple
    strategy: FractionStrategy
    scale_eps: float = 0.1
    partition_intervals: int = 64
    x: float = 1.0
    n_paths: int = 2000
    seed: int = 0
    chunk_size: int = DEFAULT_CHUNK
    workers: int = 1


@dataclass
class ResidualReport:
    n_steps: list
    median_abs: list
    n_paths: int

    @property
    def ratios(self) -> list:
        return [None] + [a / b for a, b in zip(self.median_abs, self.median_abs[1:])]

    def to_csv(self) -> str:
        rows = [(n, m, r, self.n_paths) for n, m, r in zip(self.n_steps, self.median_abs, self.ratios)]
        return csv_text(RESIDUAL_HEADER, rows)


def run_log_ratio_residual(config: ResidualConfig) -> ResidualReport:
    strategy = config.strategy.scaled(config.scale_eps)
    medians = []
    for n_steps in config.n_steps_ladder:
        grid = TimeGrid(config.horizon, int(n_steps))
        part = Partition.from_indices(uniform_indices(config.partition_intervals, grid.n_steps),
                                      grid.n_steps)

        def block(first, count, grid=grid, part=part):
            paths = simulate(config.model, grid, count, config.seed, first_path=first)
            return log_ratio_residual(config.x, strategy, part, paths).residual

        res = np.concatenate(run_chunked(block, config.n_paths, config.chunk_size, config.workers))
        medians.append(float(np.median(np.abs(res))))
    return ResidualReport(list(config.n_steps_ladder), medians, config.n_paths)


# ---------------------------------------------------------------------------
# freezing to simple predictable strategies


def freeze_strategy(strategy: FractionStrategy, m: int, paths: AssetPaths) -> TableLookup:
    """Hold the strategy's value at the left end of each of ``m`` uniform coarse intervals.

    The strategy is evaluated on ``paths`` because path-dependent rules need
    the observed history at each left endpoint.
    """
    n = paths.grid.n_steps
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in 1..{n}, got {m}")
    starts = uniform_indices(m, n)
    left = starts[np.searchsorted(starts, np.arange(n), side="right") - 1]
    return TableLookup(values=strategy.table(paths)[:, left, :])


def run_freeze_convergence(config: ConvergenceConfig) -> ConvergenceReport:
    """Continuous wealth of the frozen strategy against the original, for each ``m`` in the ladder."""
    ladder = [int(m) for m in config.partitions.ladder]

    def block(first, count):
        paths = simulate(config.model, config.grid, count, config.seed, first_path=first)
        returns = returns_from_prices(paths)
        target = wealth_continuous(config.x, config.strategy, returns)
        dist, secs = [], []
        for m in ladder:
            t0 = time.perf_counter()
            frozen = wealth_continuous(config.x, freeze_strategy(config.strategy, m, paths), returns)
            dist.append(ucp_distance(frozen, target))
            secs.append(time.perf_counter() - t0)
        return dist, secs

    parts = run_chunked(block, config.n_paths, config.chunk_size, config.workers)
    distances = [np.concatenate([p[0][i] for p in parts]) for i in range(len(ladder))]
    seconds = [sum(p[1][i] for p in parts) for i in range(len(ladder))]
    meshes = [config.grid.horizon / m for m in ladder]
    return _rows(config, ladder, meshes, distances, seconds)
