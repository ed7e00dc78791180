"""Monte Carlo engine: wealth paths, spike variations, reward estimates,
and flow-map diagnostics.

Wealth-independent strategies admit exact terminal sampling (no
discretization error): under the amount-invested dynamics X_T = x +
Gamma(t) + sqrt(Lambda(t)) Z, and under the proportional dynamics above a
floor X_T = floor + (x - floor) exp(Gamma1(t) + sqrt(Lambda1(t)) Z), which
keeps every path strictly above the floor.  Closed-loop strategies fall
back to Euler-Maruyama on the grid.  All randomness is drawn from a
seeded generator in one canonical order, so outputs are bit-identical
regardless of how downstream work is parallelized.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import FloorBreach, ValidationError, WindowOverflow
from .market import (
    ClosedLoop,
    DynamicsKind,
    DynamicsSpec,
    Family,
    MarketParams,
    ProblemSpec,
    TimeGrid,
    WealthIndependent,
)
from .measures import EmpiricalMeasure, wasserstein2_1d
from .preferences import mean_es_value, nonlinear_exp_value, rdu_value, rdu_value_weighted


# ---------------------------------------------------------------------------
# helpers: integrals on arbitrary node vectors, simulation grids
# ---------------------------------------------------------------------------


def _integrals_on_nodes(nodes, market: MarketParams, theta, convention: str):
    """Trapezoid backward integrals of (mu theta, (sigma theta)^2) on an
    arbitrary increasing node vector; returns values at nodes[0]."""
    t = np.asarray(nodes, dtype=float)
    th = np.asarray(theta(t), dtype=float)
    mu = np.asarray(market.mu(t), dtype=float)
    sig = np.asarray(market.sigma(t), dtype=float)
    dt = np.diff(t)
    gi = mu * th
    li = (sig * th) ** 2
    dg = 0.5 * (gi[:-1] + gi[1:]) * dt
    dl = 0.5 * (li[:-1] + li[1:]) * dt
    if convention == "mes":
        dg = dg - 0.5 * dl
    return float(np.sum(dg)), float(np.sum(dl))


def _sim_nodes(grid: TimeGrid, t: float, insert: tuple[float, ...] = ()) -> np.ndarray:
    if not grid.t0 <= t < grid.T:
        raise ValidationError("simulation start must lie in [t0, T)")
    nodes = grid.nodes
    keep = nodes[nodes > t + 1e-14]
    out = np.unique(np.concatenate([[t], keep, np.asarray(insert, dtype=float)]))
    if out[-1] < grid.T:
        out = np.append(out, grid.T)
    return out


# ---------------------------------------------------------------------------
# path batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathBatch:
    """Terminal samples of the controlled state with scheme metadata."""

    terminal: EmpiricalMeasure
    n_paths: int
    scheme: str  # ExactGaussianIncrement | ExactLognormal | EulerMaruyama
    seed: int
    n_steps: int

    @property
    def samples(self) -> np.ndarray:
        return self.terminal.samples


def simulate(
    dynamics: DynamicsSpec,
    strategy,
    t: float,
    x: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    insert_nodes: tuple[float, ...] = (),
) -> PathBatch:
    """Terminal law of X under the given strategy from state (t, x).

    Dispatch: wealth-independent + amount-invested -> exact Gaussian
    increment; wealth-independent + proportion-above-floor -> exact
    lognormal (all samples above the floor by construction); closed-loop
    -> Euler-Maruyama on the grid (raising FloorBreach if a proposal
    crosses the floor under the proportional dynamics).
    """
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    lo, hi = dynamics.state_space()
    if not lo < x < hi:
        raise ValidationError(f"initial state {x} outside the state space")
    nodes = _sim_nodes(grid, t, insert_nodes)
    rng = np.random.default_rng(seed)

    if isinstance(strategy, WealthIndependent):
        if dynamics.kind is DynamicsKind.AMOUNT_INVESTED:
            g, l = _integrals_on_nodes(nodes, dynamics.market, strategy, "rdut")
            z = rng.standard_normal(n_paths)
            samples = x + g + np.sqrt(l) * z
            scheme = "ExactGaussianIncrement"
        elif dynamics.kind is DynamicsKind.PROPORTION_ABOVE_FLOOR:
            g1, l1 = _integrals_on_nodes(nodes, dynamics.market, strategy, "mes")
            z = rng.standard_normal(n_paths)
            floor = dynamics.market.floor_x
            samples = floor + (x - floor) * np.exp(g1 + np.sqrt(l1) * z)
            scheme = "ExactLognormal"
        else:
            return _euler_maruyama(
                dynamics, strategy.as_closed_loop(), x, nodes, n_paths, rng, seed
            )
        return PathBatch(
            terminal=EmpiricalMeasure.from_samples(samples),
            n_paths=n_paths,
            scheme=scheme,
            seed=seed,
            n_steps=nodes.size - 1,
        )
    if isinstance(strategy, ClosedLoop):
        return _euler_maruyama(dynamics, strategy, x, nodes, n_paths, rng, seed)
    raise ValidationError(f"unsupported strategy type {type(strategy).__name__}")


def _euler_maruyama(dynamics, strategy, x, nodes, n_paths, rng, seed) -> PathBatch:
    floor = dynamics.market.floor_x
    check_floor = dynamics.kind is DynamicsKind.PROPORTION_ABOVE_FLOOR
    X = np.full(n_paths, float(x))
    for k in range(nodes.size - 1):
        t_k = float(nodes[k])
        dt = float(nodes[k + 1] - nodes[k])
        u = np.broadcast_to(np.asarray(strategy(t_k, X), dtype=float), X.shape)
        z = rng.standard_normal(n_paths)
        X = X + dynamics.b(t_k, X, u) * dt + dynamics.s(t_k, X, u) * np.sqrt(dt) * z
        if check_floor and np.any(X <= floor):
            raise FloorBreach(
                f"Euler-Maruyama proposal crossed the floor at t = {nodes[k + 1]:.6g}; "
                "use the exact scheme or a finer grid"
            )
    return PathBatch(
        terminal=EmpiricalMeasure.from_samples(X),
        n_paths=n_paths,
        scheme="EulerMaruyama",
        seed=seed,
        n_steps=nodes.size - 1,
    )


# ---------------------------------------------------------------------------
# spike variation
# ---------------------------------------------------------------------------


def spike_strategy(base, t: float, eps: float, u_bar: float, horizon: float) -> ClosedLoop:
    """The strategy equal to u_bar on [t, t + eps) and to the base
    elsewhere."""
    if eps <= 0.0:
        raise ValidationError("spike length must be positive")
    if t + eps > horizon + 1e-12:
        raise WindowOverflow(f"spike window [{t}, {t + eps}) exceeds the horizon")
    base_cl = base.as_closed_loop() if isinstance(base, WealthIndependent) else base

    def u(s, xv):
        if t <= s < t + eps:
            return np.broadcast_to(float(u_bar), np.shape(xv))
        return base_cl(s, xv)

    return ClosedLoop(u=u)


# ---------------------------------------------------------------------------
# reward estimation
# ---------------------------------------------------------------------------

_BOOTSTRAP_RESAMPLES = 200


def _reward_on_sorted(spec: ProblemSpec, xs: np.ndarray, ws: np.ndarray) -> float:
    """Family functional on a pre-sorted weighted support (bootstrap path;
    zero weights allowed)."""
    if spec.family is Family.RDUT:
        return rdu_value_weighted(xs, ws, spec.payload.distortion, spec.payload.utility)
    if spec.family is Family.MEAN_ES:
        mean = float(ws @ xs)
        cw = np.cumsum(ws)
        a0 = spec.payload.alpha0
        k = int(np.searchsorted(cw, a0, side="left"))
        full = float(ws[:k] @ xs[:k])
        prev = cw[k - 1] if k > 0 else 0.0
        es = -(full + (a0 - prev) * xs[min(k, xs.size - 1)]) / a0
        return mean - spec.payload.gamma * es
    reward = spec.payload.reward
    gx = np.asarray(reward.g(xs), dtype=float)
    return float(ws @ gx + reward.F(float(ws @ xs)))


def reward_value(spec: ProblemSpec, m: EmpiricalMeasure) -> float:
    """The family reward functional g(mu) on an empirical law."""
    if spec.family is Family.RDUT:
        return rdu_value(m, spec.payload.distortion, spec.payload.utility)
    if spec.family is Family.MEAN_ES:
        return mean_es_value(m, spec.payload.gamma, spec.payload.alpha0)
    return nonlinear_exp_value(m, spec.payload.reward)


def _bootstrap_counts(seed: int, tag: int, r: int, n: int) -> np.ndarray:
    """Replicate-r multinomial draw from its own counter-keyed stream, so
    results are identical under any partitioning of the replicate loop."""
    rng = np.random.default_rng((seed, tag, r))
    return rng.multinomial(n, np.full(n, 1.0 / n))


def _run_replicates(fn, n_boot: int, workers: int) -> np.ndarray:
    out = np.empty(n_boot)
    if workers <= 1:
        for r in range(n_boot):
            out[r] = fn(r)
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for r, val in zip(range(n_boot), pool.map(fn, range(n_boot))):
            out[r] = val
    return out


def estimate_J(
    spec: ProblemSpec,
    strategy,
    t: float,
    x: float,
    n_paths: int,
    seed: int,
    n_boot: int = _BOOTSTRAP_RESAMPLES,
    workers: int = 1,
) -> tuple[float, float]:
    """(estimate, bootstrap standard error) of J(t, x; u) = g(law X_T).

    The standard error resamples paths nonparametrically (multinomial
    reweighting on the sorted support): the distorted and quantile-based
    functionals are nonlinear in the law, so the plain CLT only covers
    their mean components.  Replicates draw from counter-keyed streams and
    reduce in index order, so the result is invariant to ``workers``.
    """
    batch = simulate(spec.dynamics(), strategy, t, x, spec.grid, n_paths, seed)
    est = reward_value(spec, batch.terminal)
    m = batch.terminal
    perm = np.argsort(m.samples, kind="stable")
    xs = m.samples[perm]

    def replicate(r: int) -> float:
        counts = _bootstrap_counts(seed, 0xB007, r, n_paths)
        return _reward_on_sorted(spec, xs, counts[perm] / n_paths)

    vals = _run_replicates(replicate, n_boot, workers)
    return est, float(np.std(vals, ddof=1))


def spike_derivative_mc(
    spec: ProblemSpec,
    profile_theta: WealthIndependent,
    t: float,
    x: float,
    u_bar: float,
    eps_list=(0.04, 0.02, 0.01),
    n_paths: int = 100_000,
    seed: int = 0,
    n_boot: int = _BOOTSTRAP_RESAMPLES,
    workers: int = 1,
):
    """Common-random-number estimate of the spike-variation derivative

        lim (J(t, x; u_{t,eps,ubar}) - J(t, x; u)) / eps

    for each window length, then two-point Richardson extrapolation on the
    smallest pair.  Returns (extrapolated, error_estimate, table) where
    the table rows are (eps, estimate, bootstrap_se); the bootstrap
    resamples the spiked and base path sets jointly.
    """
    eps_arr = sorted((float(e) for e in eps_list), reverse=True)
    if t + max(eps_arr) > spec.grid.T:
        raise WindowOverflow("largest spike window exceeds the horizon")
    dynamics = spec.dynamics()
    rows = []
    rng_master = np.random.default_rng((seed, 0x59135))
    for eps in eps_arr:
        sub_seed = int(rng_master.integers(0, 2**63 - 1))
        spiked = spike_strategy(profile_theta, t, eps, u_bar, spec.grid.T)
        base_cl = profile_theta.as_closed_loop()
        batch_base = simulate(
            dynamics, base_cl, t, x, spec.grid, n_paths, sub_seed, insert_nodes=(t + eps,)
        )
        batch_spike = simulate(
            dynamics, spiked, t, x, spec.grid, n_paths, sub_seed, insert_nodes=(t + eps,)
        )
        j_base = reward_value(spec, batch_base.terminal)
        j_spike = reward_value(spec, batch_spike.terminal)
        d = (j_spike - j_base) / eps
        # coupled bootstrap: one multinomial per replicate, applied to both
        perm_b = np.argsort(batch_base.samples, kind="stable")
        perm_s = np.argsort(batch_spike.samples, kind="stable")
        xs_b = batch_base.samples[perm_b]
        xs_s = batch_spike.samples[perm_s]

        def replicate(r: int, _eps=eps) -> float:
            counts = _bootstrap_counts(sub_seed, 0xB007, r, n_paths)
            vb = _reward_on_sorted(spec, xs_b, counts[perm_b] / n_paths)
            vs = _reward_on_sorted(spec, xs_s, counts[perm_s] / n_paths)
            return (vs - vb) / _eps

        reps = _run_replicates(replicate, n_boot, workers)
        rows.append((eps, d, float(np.std(reps, ddof=1))))
    # two-point Richardson on the two smallest windows: D ~ D0 + C eps
    (e1, d1, s1), (e2, d2, s2) = rows[-2], rows[-1]
    extrap = d2 + (d2 - d1) * e2 / (e1 - e2)
    se = float(np.hypot((1.0 + e2 / (e1 - e2)) * s2, (e2 / (e1 - e2)) * s1))
    return float(extrap), se, rows


# ---------------------------------------------------------------------------
# flow-map diagnostics
# ---------------------------------------------------------------------------


def flow_diagnostics(
    dynamics: DynamicsSpec,
    strategy,
    mu0: EmpiricalMeasure,
    grid: TimeGrid,
    n_paths: int = 20_000,
    seed: int = 0,
    shift_delta: float = 0.05,
) -> dict:
    """Empirical continuity constants of the measure flow.

    Reports sup W2(phi_s mu, phi_r mu)/|s-r|^{1/2} over node pairs, the
    coupled-path Lipschitz ratio W2(phi mu, phi nu)/W2(mu, nu) for a
    shifted initial law, and the flow-property defect: simulate to an
    intermediate node, restart, and compare with the straight run in W2.
    """
    nodes = grid.nodes
    rng = np.random.default_rng((seed, 0xF10))
    # stratified initial states from mu0
    u = (np.arange(n_paths) + 0.5) / n_paths
    x0 = np.asarray(mu0.quantile(u), dtype=float)
    strat_cl = strategy.as_closed_loop() if isinstance(strategy, WealthIndependent) else strategy

    def run(xstart: np.ndarray, z: np.ndarray) -> np.ndarray:
        X = np.empty((nodes.size, xstart.size))
        X[0] = xstart
        cur = xstart.copy()
        for k in range(nodes.size - 1):
            t_k = float(nodes[k])
            dt = float(nodes[k + 1] - nodes[k])
            uval = np.broadcast_to(np.asarray(strat_cl(t_k, cur), dtype=float), cur.shape)
            cur = cur + dynamics.b(t_k, cur, uval) * dt + dynamics.s(
                t_k, cur, uval
            ) * np.sqrt(dt) * z[k]
            X[k + 1] = cur
        return X

    z = rng.standard_normal((nodes.size - 1, n_paths))
    paths = run(x0, z)
    marginals = [EmpiricalMeasure.from_samples(paths[k]) for k in range(nodes.size)]

    holder = 0.0
    holder_pair = (0, 0)
    for i in range(0, nodes.size, max(1, nodes.size // 12)):
        for j in range(i + 1, nodes.size, max(1, nodes.size // 12)):
            ratio = wasserstein2_1d(marginals[i], marginals[j]) / np.sqrt(
                nodes[j] - nodes[i]
            )
            if ratio > holder:
                holder, holder_pair = ratio, (i, j)

    # Lipschitz in the initial law: common noise, shifted start
    paths_shift = run(x0 + shift_delta, z)
    lip = 0.0
    for k in range(0, nodes.size, max(1, nodes.size // 12)):
        d = wasserstein2_1d(
            EmpiricalMeasure.from_samples(paths_shift[k]), marginals[k]
        )
        lip = max(lip, d / shift_delta)

    # flow property: restart at the midpoint with fresh noise
    mid = nodes.size // 2
    z_fresh = rng.standard_normal((nodes.size - 1, n_paths))
    cur = paths[mid].copy()
    for k in range(mid, nodes.size - 1):
        t_k = float(nodes[k])
        dt = float(nodes[k + 1] - nodes[k])
        uval = np.broadcast_to(np.asarray(strat_cl(t_k, cur), dtype=float), cur.shape)
        cur = cur + dynamics.b(t_k, cur, uval) * dt + dynamics.s(t_k, cur, uval) * np.sqrt(
            dt
        ) * z_fresh[k]
    flow_defect = wasserstein2_1d(
        EmpiricalMeasure.from_samples(cur), marginals[-1]
    )

    return {
        "holder_half_ratio": float(holder),
        "holder_pair_times": [float(nodes[holder_pair[0]]), float(nodes[holder_pair[1]])],
        "lipschitz_in_law_ratio": float(lip),
        "flow_property_w2_defect": float(flow_defect),
        "n_paths": int(n_paths),
        "seed": int(seed),
    }
