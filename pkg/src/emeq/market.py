"""Controlled dynamics specifications, time grids, and problem configuration.

Coefficient functions of time are either constants or tabulated values with
linear interpolation.  The interest rate is fixed at zero, so the drift of
the wealth dynamics is mu(t) times the control (amount invested) or
mu(t) * theta * (x - floor) for the proportional dynamics above a floor.

Backward cumulative integrals

    Gamma(t)   = int_t^T mu * theta ds
    Lambda(t)  = int_t^T (sigma * theta)^2 ds
    Gamma1(t)  = int_t^T [mu * theta - (sigma * theta)^2 / 2] ds

use the composite trapezoid on the grid, exact for piecewise-constant
strategies combined with constant or tabulated-linear coefficients.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SchemaError, ValidationError
from .preferences import (
    Distortion,
    ExpUtility,
    NonlinearExpectationReward,
    distortion_from_config,
    mean_variance_reward,
)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = t0 + k (T - t0)/n_steps, k = 0..n_steps."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValidationError("time grid requires t0 < T")
        if self.n_steps < 1:
            raise ValidationError("time grid requires n_steps >= 1")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_steps + 1)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps


@dataclass(frozen=True)
class CoefFn:
    """Deterministic function of time: a constant or a linear interpolant
    of tabulated (t, value) pairs."""

    kind: str  # "const" | "table"
    const: float = 0.0
    table_t: tuple[float, ...] = ()
    table_v: tuple[float, ...] = ()

    @staticmethod
    def constant(v: float) -> "CoefFn":
        return CoefFn(kind="const", const=float(v))

    @staticmethod
    def tabulated(pairs) -> "CoefFn":
        ts = tuple(float(p[0]) for p in pairs)
        vs = tuple(float(p[1]) for p in pairs)
        if len(ts) < 2:
            raise ValidationError("tabulated coefficient needs at least two points")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError("tabulated times must be strictly increasing")
        return CoefFn(kind="table", table_t=ts, table_v=vs)

    @staticmethod
    def from_config(spec, key: str) -> "CoefFn":
        if isinstance(spec, (int, float)):
            return CoefFn.constant(spec)
        if isinstance(spec, dict):
            if "const" in spec:
                return CoefFn.constant(spec["const"])
            if "table" in spec:
                return CoefFn.tabulated(spec["table"])
        raise SchemaError(
            f"field {key!r} must be a number, {{'const': v}} or {{'table': [[t, v], ...]}}"
        )

    def __call__(self, t):
        if self.kind == "const":
            return (
                self.const
                if np.ndim(t) == 0
                else np.full(np.shape(t), self.const, dtype=float)
            )
        return np.interp(t, self.table_t, self.table_v)

    def to_config(self):
        if self.kind == "const":
            return {"const": self.const}
        return {"table": [[t, v] for t, v in zip(self.table_t, self.table_v)]}


@dataclass(frozen=True)
class MarketParams:
    """Market coefficients: drift mu(.), volatility sigma(.) > 0, and the
    wealth floor (mean-ES only, <= 0)."""

    mu: CoefFn
    sigma: CoefFn
    floor_x: float = 0.0

    def validate_on(self, grid: TimeGrid) -> None:
        t = np.linspace(grid.t0, grid.T, 4 * grid.n_steps + 1)
        sig = np.asarray(self.sigma(t), dtype=float)
        if np.any(sig <= 0.0):
            raise ValidationError("sigma(t) must be positive on [t0, T]")
        if not (np.all(np.isfinite(sig)) and np.all(np.isfinite(self.mu(t)))):
            raise ValidationError("mu, sigma must be finite on [t0, T]")


class DynamicsKind(enum.Enum):
    GENERIC_CONTROLLED = "generic_controlled"
    AMOUNT_INVESTED = "amount_invested"
    PROPORTION_ABOVE_FLOOR = "proportion_above_floor"


@dataclass(frozen=True)
class DynamicsSpec:
    """Controlled SDE dX = b(t, X, u) dt + s(t, X, u) dW.

    The two named kinds derive their coefficients from the market:
    amount-invested has b = mu(t) u and s = sigma(t) u; proportion-above-
    floor has b = mu(t) u (x - floor) and s = sigma(t) u (x - floor) with
    state space (floor, inf).
    """

    kind: DynamicsKind
    market: MarketParams
    drift: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = None
    diffusion: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = None

    def b(self, t: float, x, u):
        if self.kind is DynamicsKind.AMOUNT_INVESTED:
            return self.market.mu(t) * np.asarray(u, dtype=float) + 0.0 * np.asarray(x)
        if self.kind is DynamicsKind.PROPORTION_ABOVE_FLOOR:
            return (
                self.market.mu(t)
                * np.asarray(u, dtype=float)
                * (np.asarray(x, dtype=float) - self.market.floor_x)
            )
        return self.drift(t, x, u)

    def s(self, t: float, x, u):
        if self.kind is DynamicsKind.AMOUNT_INVESTED:
            return self.market.sigma(t) * np.asarray(u, dtype=float) + 0.0 * np.asarray(x)
        if self.kind is DynamicsKind.PROPORTION_ABOVE_FLOOR:
            return (
                self.market.sigma(t)
                * np.asarray(u, dtype=float)
                * (np.asarray(x, dtype=float) - self.market.floor_x)
            )
        return self.diffusion(t, x, u)

    def state_space(self) -> tuple[float, float]:
        if self.kind is DynamicsKind.PROPORTION_ABOVE_FLOOR:
            return (self.market.floor_x, np.inf)
        return (-np.inf, np.inf)


class Family(enum.Enum):
    RDUT = "RDUT"
    MEAN_ES = "MeanES"
    NONLINEAR_EXPECTATION = "NonlinearExpectation"


@dataclass(frozen=True)
class RdutPayload:
    alpha: float
    distortion: Distortion

    @property
    def utility(self) -> ExpUtility:
        return ExpUtility(self.alpha)


@dataclass(frozen=True)
class MeanEsPayload:
    gamma: float
    alpha0: float


@dataclass(frozen=True)
class NonlinearExpectationPayload:
    reward: NonlinearExpectationReward
    instance: str = "custom"
    gamma: float | None = None  # populated for the mean-variance instance


@dataclass(frozen=True)
class ProblemSpec:
    """Validated problem: family tag, market, grid, preference payload,
    and the interval of allowed initial states."""

    family: Family
    market: MarketParams
    grid: TimeGrid
    payload: RdutPayload | MeanEsPayload | NonlinearExpectationPayload
    allowed_set: tuple[float, float]
    seed: int | None = None
    config: dict = field(default_factory=dict, repr=False)

    def dynamics(self) -> DynamicsSpec:
        if self.family is Family.MEAN_ES:
            return DynamicsSpec(DynamicsKind.PROPORTION_ABOVE_FLOOR, self.market)
        return DynamicsSpec(DynamicsKind.AMOUNT_INVESTED, self.market)

    def to_json(self) -> str:
        return json.dumps(self.config, sort_keys=True)


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WealthIndependent:
    """Strategy theta(t), piecewise continuous on [t0, T].

    ``cell_values`` marks an exactly piecewise-constant strategy on the
    grid cells, enabling exact integrals; otherwise theta is any callable
    (constants are lifted).
    """

    theta: Callable[[np.ndarray], np.ndarray]
    cell_values: np.ndarray | None = None

    @staticmethod
    def constant(value: float) -> "WealthIndependent":
        v = float(value)
        return WealthIndependent(
            theta=lambda t: np.full(np.shape(t), v, dtype=float)
            if np.ndim(t)
            else v
        )

    @staticmethod
    def from_nodes(grid: TimeGrid, values) -> "WealthIndependent":
        vals = np.asarray(values, dtype=float)
        nodes = grid.nodes
        return WealthIndependent(theta=lambda t: np.interp(t, nodes, vals))

    @staticmethod
    def piecewise_constant(grid: TimeGrid, cell_values) -> "WealthIndependent":
        vals = np.asarray(cell_values, dtype=float)
        if vals.size != grid.n_steps:
            raise ValidationError("need one value per grid cell")
        nodes = grid.nodes

        def theta(t):
            idx = np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, vals.size - 1)
            return vals[idx]

        return WealthIndependent(theta=theta, cell_values=vals)

    def __call__(self, t):
        return self.theta(t)

    def as_closed_loop(self) -> "ClosedLoop":
        return ClosedLoop(u=lambda t, x: self.theta(t) + 0.0 * np.asarray(x))


@dataclass(frozen=True)
class ClosedLoop:
    """Measurable feedback control u(t, x), right-continuous in t."""

    u: Callable[[float, np.ndarray], np.ndarray]

    def __call__(self, t, x):
        return self.u(t, x)


StrategyProfile = WealthIndependent | ClosedLoop


# ---------------------------------------------------------------------------
# configuration ingestion
# ---------------------------------------------------------------------------

_KNOWN_KEYS = {
    "family",
    "mu",
    "sigma",
    "alpha",
    "gamma",
    "alpha0",
    "floor",
    "t0",
    "T",
    "n_steps",
    "w",
    "seed",
    "instance",
}


def make_problem(config: dict) -> ProblemSpec:
    """Validate a configuration document and expand constant-coefficient
    shortcuts into functions of time."""
    if not isinstance(config, dict):
        raise SchemaError("configuration must be a JSON object")
    unknown = set(config) - _KNOWN_KEYS
    if unknown:
        raise SchemaError(f"unknown configuration keys: {sorted(unknown)}")
    for key in ("family", "mu", "sigma", "T"):
        if key not in config:
            raise SchemaError(f"missing required field {key!r}")
    try:
        family = Family(config["family"])
    except ValueError:
        raise SchemaError(f"unrecognized family {config['family']!r}") from None

    t0 = float(config.get("t0", 0.0))
    T = float(config["T"])
    if t0 >= T:
        raise ValidationError(f"need t0 < T, got t0={t0}, T={T}")
    n_steps = int(config.get("n_steps", 200))
    grid = TimeGrid(t0=t0, T=T, n_steps=n_steps)

    floor = float(config.get("floor", 0.0))
    market = MarketParams(
        mu=CoefFn.from_config(config["mu"], "mu"),
        sigma=CoefFn.from_config(config["sigma"], "sigma"),
        floor_x=floor,
    )
    market.validate_on(grid)

    seed = config.get("seed")
    seed = int(seed) if seed is not None else None

    if family is Family.RDUT:
        if "alpha" not in config:
            raise SchemaError("RDUT family requires 'alpha'")
        alpha = float(config["alpha"])
        if alpha <= 0.0:
            raise ValidationError("alpha must be positive")
        payload = RdutPayload(
            alpha=alpha, distortion=distortion_from_config(config.get("w", "identity"))
        )
        allowed = (-np.inf, np.inf)
    elif family is Family.MEAN_ES:
        for key in ("gamma", "alpha0"):
            if key not in config:
                raise SchemaError(f"MeanES family requires {key!r}")
        gamma = float(config["gamma"])
        alpha0 = float(config["alpha0"])
        if gamma <= 0.0:
            raise ValidationError("gamma must be positive")
        if not 0.0 < alpha0 < 1.0:
            raise ValidationError("alpha0 must lie in (0, 1)")
        if floor > 0.0:
            raise ValidationError("floor must be <= 0")
        payload = MeanEsPayload(gamma=gamma, alpha0=alpha0)
        allowed = (floor, np.inf)
    else:
        instance = config.get("instance", "mean_variance")
        if instance != "mean_variance":
            raise SchemaError(
                "only the 'mean_variance' instance is configurable from JSON; "
                "construct other rewards programmatically"
            )
        if "gamma" not in config:
            raise SchemaError("mean-variance instance requires 'gamma'")
        gamma = float(config["gamma"])
        if gamma <= 0.0:
            raise ValidationError("gamma must be positive")
        payload = NonlinearExpectationPayload(
            reward=mean_variance_reward(gamma), instance="mean_variance", gamma=gamma
        )
        allowed = (-np.inf, np.inf)

    return ProblemSpec(
        family=family,
        market=market,
        grid=grid,
        payload=payload,
        allowed_set=allowed,
        seed=seed,
        config=dict(config),
    )


def load_problem(path) -> ProblemSpec:
    with open(path) as fh:
        config = json.load(fh)
    return make_problem(config)


# ---------------------------------------------------------------------------
# backward cumulative integrals
# ---------------------------------------------------------------------------


def gamma_and_lambda_integrals(
    theta: WealthIndependent,
    market: MarketParams,
    grid: TimeGrid,
    convention: str = "rdut",
) -> tuple[np.ndarray, np.ndarray]:
    """Backward integrals (Gamma, Lambda) at the grid nodes.

    convention "rdut":  Gamma = int_t^T mu*theta,
                        Lambda = int_t^T (sigma*theta)^2;
    convention "mes":   Gamma1 = int_t^T mu*theta - (sigma*theta)^2/2,
                        Lambda1 = int_t^T (sigma*theta)^2.

    Both vanish at T and Lambda is non-increasing in t.  Piecewise-constant
    strategies are integrated exactly per cell.
    """
    if convention not in ("rdut", "mes"):
        raise ValidationError(f"unknown convention {convention!r}")
    nodes = grid.nodes
    mu = np.asarray(market.mu(nodes), dtype=float)
    sig = np.asarray(market.sigma(nodes), dtype=float)
    if theta.cell_values is not None:
        th = theta.cell_values
        # per-cell trapezoid of mu and sigma^2 themselves, exact for
        # constant or tabulated-linear coefficients
        mu_cell = 0.5 * (mu[:-1] + mu[1:])
        # sigma tabulated-linear makes sigma^2 quadratic; Simpson on the
        # cell is exact for that
        sig_mid = np.asarray(market.sigma(0.5 * (nodes[:-1] + nodes[1:])), dtype=float)
        sig2_cell = (sig[:-1] ** 2 + 4.0 * sig_mid**2 + sig[1:] ** 2) / 6.0
        dg = mu_cell * th * grid.dt
        dl = sig2_cell * th**2 * grid.dt
    else:
        th = np.asarray(theta(nodes), dtype=float)
        g_int = mu * th
        l_int = (sig * th) ** 2
        dg = 0.5 * (g_int[:-1] + g_int[1:]) * grid.dt
        dl = 0.5 * (l_int[:-1] + l_int[1:]) * grid.dt
    if convention == "mes":
        dg = dg - 0.5 * dl
    gamma = np.concatenate([np.cumsum(dg[::-1])[::-1], [0.0]])
    lam = np.concatenate([np.cumsum(dl[::-1])[::-1], [0.0]])
    lam = np.maximum(lam, 0.0)
    return gamma, lam
