"""Asset-price models, path simulation on a uniform grid, and return increments.

Prices are simulated by exact log-normal stepping of the diffusive part, with
at most one jump per asset per fine step. Every simulated path draws from its
own counter-based Philox stream keyed by ``(seed, path index)``, so results do
not depend on how paths are chunked or scheduled across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# jumps are placed on grid steps; larger step probabilities blur the jump/diffusion split
MAX_JUMP_STEP_PROBABILITY = 0.1


class ModelError(ValueError):
    """Raised for an inconsistent model specification."""


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.horizon
        return t


# ---------------------------------------------------------------------------
# jump-size laws (law of the return jump Delta R, supported in [-1, inf))


@dataclass(frozen=True)
class FixedJump:
    size: float

    def __post_init__(self):
        if self.size < -1:
            raise ModelError(f"jump size {self.size} is below -1")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return np.full(shape, float(self.size))

    def quadrature(self):
        return np.array([float(self.size)]), np.array([1.0])


@dataclass(frozen=True)
class TwoPointJump:
    """Jump equal to ``low`` with probability ``p_low``, else ``high``."""

    low: float
    high: float
    p_low: float = 0.5

    def __post_init__(self):
        if min(self.low, self.high) < -1:
            raise ModelError(f"jump sizes ({self.low}, {self.high}) fall below -1")
        if not 0 <= self.p_low <= 1:
            raise ModelError(f"p_low must lie in [0, 1], got {self.p_low}")

    def sample(self, rng, shape):
        u = rng.random(shape)
        return np.where(u < self.p_low, float(self.low), float(self.high))

    def quadrature(self):
        return (np.array([float(self.low), float(self.high)]),
                np.array([self.p_low, 1.0 - self.p_low]))


@dataclass(frozen=True)
class LogNormalJump:
    """Jump ``exp(Z) - 1`` with ``Z ~ N(mean, std**2)``; always above -1."""

    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ModelError(f"jump std must be nonnegative, got {self.std}")

    def sample(self, rng, shape):
        return np.expm1(self.mean + self.std * rng.standard_normal(shape))

    def quadrature(self, n_nodes: int = 64):
        # Gauss-Legendre on the normal density over mean +- 10 std
        if self.std == 0:
            return np.array([np.expm1(self.mean)]), np.array([1.0])
        x, w = np.polynomial.legendre.leggauss(n_nodes)
        half = 10.0 * self.std
        z = self.mean + half * x
        dens = np.exp(-0.5 * ((z - self.mean) / self.std) ** 2)
        w = w * dens
        return np.expm1(z), w / w.sum()


JumpLaw = FixedJump | TwoPointJump | LogNormalJump


# ---------------------------------------------------------------------------


def _as_vector(value, d: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1 and d > 1:
        arr = np.full(d, arr.item())
    if arr.shape != (d,):
        raise ModelError(f"{name} must have {d} entries, got shape {arr.shape}")
    return arr


def correlation_root(corr: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == corr`` (Cholesky, eigen-root if singular)."""
    corr = np.asarray(corr, dtype=float)
    d = corr.shape[0]
    if corr.shape != (d, d):
        raise ModelError("correlation matrix must be square")
    if not np.allclose(corr, corr.T, atol=tol):
        raise ModelError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=tol):
        raise ModelError("correlation matrix must have a unit diagonal")
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(corr)
        if vals.min() < -tol:
            raise ModelError(
                f"correlation matrix is not positive semidefinite (min eigenvalue {vals.min():.3g})"
            ) from None
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Market model. Use the ``black_scholes``, ``merton`` or ``fixture`` constructors."""

    kind: str
    s0: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    corr: np.ndarray
    intensity: np.ndarray
    jump_law: JumpLaw | None = None
    table: np.ndarray | None = None
    fixture_jumps: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.s0.shape[0]

    @classmethod
    def black_scholes(cls, mu, sigma, s0=100.0, corr=None, d=None):
        return cls.merton(mu, sigma, s0=s0, corr=corr, intensity=0.0, jump_law=None, d=d,
                          kind="black_scholes")

    @classmethod
    def merton(cls, mu, sigma, s0=100.0, corr=None, intensity=0.0, jump_law=None, d=None,
               kind="merton"):
        if d is None:
            d = max(np.size(mu), np.size(sigma), np.size(s0), np.size(intensity),
                    0 if corr is None else np.shape(corr)[0])
        s0 = _as_vector(s0, d, "s0")
        mu = _as_vector(mu, d, "mu")
        sigma = _as_vector(sigma, d, "sigma")
        intensity = _as_vector(intensity, d, "intensity")
        corr = np.eye(d) if corr is None else np.asarray(corr, dtype=float).reshape(d, d)
        if np.any(s0 <= 0):
            raise ModelError("initial prices must be positive")
        if np.any(sigma < 0):
            raise ModelError("volatilities must be nonnegative")
        if np.any(intensity < 0):
            raise ModelError("jump intensities must be nonnegative")
        if np.any(intensity > 0) and jump_law is None:
            raise ModelError("positive jump intensity requires a jump law")
        correlation_root(corr)
        return cls(kind, s0, mu, sigma, corr, intensity, jump_law)

    @classmethod
    def fixture(cls, table, jumps=None):
        """Explicit price table of shape ``(N + 1, d)`` shared by every path.

        ``jumps`` maps a step index ``k`` to a return jump (scalar or per-asset)
        applied multiplicatively from index ``k`` on; those steps are jump-marked.
        """
        table = np.asarray(table, dtype=float)
        if table.ndim == 1:
            table = table[:, None]
        if table.shape[0] < 2:
            raise ModelError("fixture needs at least two grid points")
        if np.any(table < 0) or np.any(table[0] <= 0):
            raise ModelError("fixture prices must be nonnegative with positive initial prices")
        d = table.shape[1]
        jumps = {int(k): _as_vector(v, d, f"jump at step {k}") for k, v in (jumps or {}).items()}
        for k, v in jumps.items():
            if not 1 <= k < table.shape[0]:
                raise ModelError(f"fixture jump step {k} outside 1..{table.shape[0] - 1}")
            if np.any(v < -1):
                raise ModelError(f"fixture jump at step {k} is below -1")
        zeros = np.zeros(d)
        return cls("fixture", table[0].copy(), zeros, zeros, np.eye(d), zeros, None,
                   table, jumps)

    def check_grid(self, grid: TimeGrid) -> None:
        if self.kind == "fixture":
            if self.table.shape[0] != grid.n_steps + 1:
                raise ModelError(
                    f"fixture has {self.table.shape[0]} rows but grid has {grid.n_steps + 1} points"
                )
            return
        p = self.intensity * grid.dt
        if np.any(p >= MAX_JUMP_STEP_PROBABILITY):
            raise ModelError(
                f"jump-resolution rule violated: intensity * dt = {p.max():.4g} must stay "
                f"below {MAX_JUMP_STEP_PROBABILITY}"
            )


@dataclass(eq=False)
class AssetPaths:
    """Price ensemble ``values[p, k, i]`` with ``jump_mark`` flags of equal shape."""

    grid: TimeGrid
    values: np.ndarray
    jump_mark: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def subset(self, idx) -> "AssetPaths":
        return AssetPaths(self.grid, self.values[idx], self.jump_mark[idx])


@dataclass(eq=False)
class ReturnIncrements:
    """``dR[p, k - 1, i]`` is the return over fine step ``k - 1 -> k``."""

    paths: AssetPaths
    dR: np.ndarray
    jump_mark: np.ndarray


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    key = (int(path_index) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def _simulate_one(model: ModelSpec, grid: TimeGrid, root: np.ndarray, rng) -> tuple:
    n, d, dt = grid.n_steps, model.d, grid.dt
    z = rng.standard_normal((n, d)) @ root.T
    u = rng.random((n, d))
    jumps = (model.jump_law.sample(rng, (n, d)) if model.jump_law is not None
             else np.zeros((n, d)))
    marks = u < model.intensity * dt
    log_step = (model.mu - 0.5 * model.sigma**2) * dt + model.sigma * np.sqrt(dt) * z
    factor = np.exp(log_step) * np.where(marks, 1.0 + jumps, 1.0)
    values = np.empty((n + 1, d))
    values[0] = model.s0
    values[1:] = model.s0 * np.cumprod(factor, axis=0)
    return values, marks


def _fixture_paths(model: ModelSpec, grid: TimeGrid, n_paths: int):
    values = model.table.copy()
    marks = np.zeros(values.shape, dtype=bool)
    for k in sorted(model.fixture_jumps):
        values[k:] *= 1.0 + model.fixture_jumps[k]
        marks[k] |= model.fixture_jumps[k] != 0
    values = np.maximum(values, 0.0)
    return (np.broadcast_to(values, (n_paths,) + values.shape).copy(),
            np.broadcast_to(marks, (n_paths,) + marks.shape).copy())


def _absorb(values: np.ndarray, marks: np.ndarray) -> None:
    dead = np.logical_or.accumulate(values == 0.0, axis=1)
    hit = dead.copy()
    hit[:, 1:] &= ~dead[:, :-1]
    marks |= hit & (np.arange(values.shape[1]) > 0)[None, :, None]
    marks[:, 1:] &= ~dead[:, :-1]
    values[dead] = 0.0


def simulate(model: ModelSpec, grid: TimeGrid, n_paths: int, seed: int,
             first_path: int = 0) -> AssetPaths:
    """Simulate paths ``first_path .. first_path + n_paths - 1`` of the ensemble.

    Path ``p`` depends only on ``(seed, p)``, so simulating a block of paths
    gives the same numbers as slicing a full simulation.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be at least 1, got {n_paths}")
    model.check_grid(grid)
    n, d = grid.n_steps, model.d
    if model.kind == "fixture":
        values, marks = _fixture_paths(model, grid, n_paths)
    else:
        root = correlation_root(model.corr)
        values = np.empty((n_paths, n + 1, d))
        marks = np.zeros((n_paths, n + 1, d), dtype=bool)
        for j in range(n_paths):
            rng = path_generator(seed, first_path + j)
            values[j], marks[j, 1:] = _simulate_one(model, grid, root, rng)
    _absorb(values, marks)
    return AssetPaths(grid, values, marks)


def returns_from_prices(paths: AssetPaths) -> ReturnIncrements:
    prev = paths.values[:, :-1, :]
    diff = paths.values[:, 1:, :] - prev
    dR = np.divide(diff, prev, out=np.zeros_like(diff), where=prev > 0)
    return ReturnIncrements(paths, dR, paths.jump_mark[:, 1:, :])


def prices_from_returns(s0: np.ndarray, returns: ReturnIncrements) -> np.ndarray:
    """Rebuild prices by ``S_k = S_{k-1} (1 + dR_k)``; ``s0`` is ``(d,)`` or per path ``(P, d)``."""
    s0 = np.asarray(s0, dtype=float)
    if s0.ndim == 2:
        s0 = s0[:, None, :]
    growth = np.cumprod(1.0 + returns.dR, axis=1)
    out = np.empty((returns.dR.shape[0], returns.dR.shape[1] + 1, returns.dR.shape[2]))
    out[:, :1, :] = s0
    out[:, 1:, :] = s0 * growth
    return out


def load_fixture_table(path) -> tuple[TimeGrid, np.ndarray]:
    """Read a ``t,S1,...,Sd`` table; times must form a uniform grid from 0."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = [h.strip() for h in lines[0].split(",")]
    if header[0] != "t" or len(header) < 2 or any(
            h != f"S{i}" for i, h in enumerate(header[1:], start=1)):
        raise ModelError(f"fixture header must be 't,S1,...,Sd', got {lines[0]!r}")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if rows.ndim != 2 or rows.shape[1] != len(header):
        raise ModelError("fixture rows must have as many columns as the header")
    t = rows[:, 0]
    grid = TimeGrid(float(t[-1]), len(t) - 1)
    if t[0] != 0 or not np.allclose(t, grid.times, rtol=0, atol=1e-9 * grid.horizon):
        raise ModelError("fixture times must be a uniform grid starting at 0")
    return grid, rows[:, 1:]
