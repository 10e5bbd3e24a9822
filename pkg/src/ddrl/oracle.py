"""Dynamic-programming ground truth for mono-scale environments.

Backward induction on an (alpha, last weight) grid.  Actions are restricted
to the last-weight grid so the next last weight is always a grid point; the
continuation value is a Gauss-Hermite expectation over the next alpha with
linear interpolation along the alpha axis.

Arithmetic is arranged so that, on symmetric grids, the solution is exactly
odd-symmetric: ``a*(-alpha, -lw) == -a*(alpha, lw)`` bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import RegularGridInterpolator

from .diffcore import UsageError
from .envsim import CostSpec, EnvSpec, MonoScale, env_from_dict, env_to_dict, risk_term


@dataclass(frozen=True)
class GridSpec:
    k_alpha: float = 4.0
    n_alpha: int = 201
    lw_bound: float = 8.0
    n_lw: int = 321
    n_quad: int = 21
    alpha_bound: float | None = None  # overrides k_alpha * stationary std

    def __post_init__(self):
        for name in ("n_alpha", "n_lw", "n_quad"):
            n = getattr(self, name)
            if n < 3 or n % 2 == 0:
                raise UsageError(f"{name} must be odd and >= 3, got {n}")
        if self.lw_bound <= 0 or self.k_alpha <= 0:
            raise UsageError("grid bounds must be positive")


def symmetric_grid(bound: float, n: int) -> np.ndarray:
    """``linspace(-bound, bound, n)`` forced to be exactly antisymmetric."""
    g = np.linspace(-bound, bound, n)
    g = (g - g[::-1]) / 2.0
    g[n // 2] = 0.0
    return g


def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for E[f(Z)], Z ~ N(0, 1); symmetric to the last bit."""
    x, w = hermegauss(n)
    x = (x - x[::-1]) / 2.0
    x[n // 2] = 0.0
    w = (w + w[::-1]) / 2.0
    return x, w / w.sum()


def interp_alpha(values: np.ndarray, grid: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``values[i, :]`` at points ``y`` along ``grid``.

    Brackets are chosen from ``|y|`` and mirrored, so ``f(-y)`` on mirrored
    data equals ``f(y)`` exactly.  Points outside the grid are clamped.
    """
    n = grid.size
    y = np.clip(y, grid[0], grid[-1])
    ay = np.abs(y)
    hi_p = np.minimum(np.searchsorted(grid, ay, side="right"), n - 1)
    lo_p = hi_p - 1
    neg = y < 0
    lo = np.where(neg, n - 1 - hi_p, lo_p)
    hi = np.where(neg, n - 1 - lo_p, hi_p)
    left = (grid[hi] - y)[:, None]
    right = (y - grid[lo])[:, None]
    width = (grid[hi] - grid[lo])[:, None]
    return (values[lo] * left + values[hi] * right) / width


def alpha_grid_for(env: EnvSpec, grid: GridSpec) -> np.ndarray:
    std = float(env.stationary_std()[0])
    need = grid.k_alpha * std
    if grid.alpha_bound is None:
        if need <= 0:
            raise UsageError("alpha has zero stationary spread; set GridSpec.alpha_bound")
        bound = need
    else:
        if grid.alpha_bound < need:
            raise UsageError(
                f"alpha grid bound {grid.alpha_bound} does not contain +-{grid.k_alpha} stationary stds ({need:.4g})"
            )
        bound = grid.alpha_bound
    return symmetric_grid(bound, grid.n_alpha)


def continuation(v_next: np.ndarray, alphas: np.ndarray, rho: float, sigma: float, nodes, weights) -> np.ndarray:
    """``E[V(rho*alpha + sigma*Z, a)]`` for every alpha row and action column."""
    k = nodes.size
    mid = k // 2
    y = rho * alphas[:, None] + sigma * nodes[None, :]
    vy = interp_alpha(v_next, alphas, y.ravel()).reshape(alphas.size, k, -1)
    out = weights[mid] * vy[:, mid]
    # pair mirrored nodes before summing so reversal symmetry is exact
    for j in range(mid):
        out = out + weights[j] * (vy[:, j] + vy[:, k - 1 - j])
    return out


@dataclass(frozen=True)
class DpSolution:
    alpha_grid: np.ndarray
    lw_grid: np.ndarray
    action_index: np.ndarray  # (T, n_alpha, n_lw), entry h-1 = policy with h steps to go
    values: np.ndarray  # (T + 1, n_alpha, n_lw), entry h = V_h
    env: EnvSpec
    grid: GridSpec

    @property
    def horizon(self) -> int:
        return self.action_index.shape[0]

    @property
    def value(self) -> np.ndarray:
        return self.values[-1]

    def action(self, steps_to_go: int | None = None) -> np.ndarray:
        h = self.horizon if steps_to_go is None else steps_to_go
        return self.lw_grid[self.action_index[h - 1]]

    @property
    def input_dim(self) -> int:
        return 2

    def __call__(self, features) -> np.ndarray:
        """Bilinearly interpolated optimal action at ``(alpha, lw)`` rows."""
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != 2:
            raise UsageError("DP policy takes (alpha, lw) features")
        pts = np.column_stack([
            np.clip(x[:, 0], self.alpha_grid[0], self.alpha_grid[-1]),
            np.clip(x[:, 1], self.lw_grid[0], self.lw_grid[-1]),
        ])
        out = self._interpolator()(pts)
        return out[0] if np.ndim(features) == 1 else out

    def _interpolator(self):
        cached = self.__dict__.get("_interp")
        if cached is None:
            cached = RegularGridInterpolator((self.alpha_grid, self.lw_grid), self.action(), method="linear")
            object.__setattr__(self, "_interp", cached)
        return cached

    def to_csv(self, path) -> None:
        a = self.action()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "lw", "action", "value"])
            for i, al in enumerate(self.alpha_grid):
                for j, lw in enumerate(self.lw_grid):
                    w.writerow([repr(float(al)), repr(float(lw)), repr(float(a[i, j])), repr(float(self.value[i, j]))])


def save_solution(path, dp: DpSolution) -> None:
    """Write a solution to ``.npz`` (grids, action indices, values, env and grid specs)."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            alpha_grid=dp.alpha_grid,
            lw_grid=dp.lw_grid,
            action_index=dp.action_index,
            values=dp.values,
            env=np.array(json.dumps(env_to_dict(dp.env), sort_keys=True)),
            grid=np.array(json.dumps(asdict(dp.grid), sort_keys=True)),
        )


def load_solution(path) -> DpSolution:
    try:
        with np.load(path, allow_pickle=False) as z:
            return DpSolution(
                z["alpha_grid"],
                z["lw_grid"],
                z["action_index"],
                z["values"],
                env_from_dict(json.loads(str(z["env"]))),
                GridSpec(**json.loads(str(z["grid"]))),
            )
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read DP solution {path}: {exc}") from None


def step_rewards(env: EnvSpec, alphas: np.ndarray, lws: np.ndarray, actions: np.ndarray):
    """``(gain[i, a], trade_cost[j, a])`` with reward = gain - trade_cost."""
    gain = actions[None, :] * alphas[:, None] - risk_term(actions, env.risk)[None, :]
    trade = actions[None, :] - lws[:, None]
    cost = env.cost.l1_spread * np.abs(trade) + env.cost.l2_coeff * (trade * trade)
    return gain, cost


def _best(q, dist):
    qmax = q.max(axis=-1)
    # ties go to the smallest trade
    key = np.where(q == qmax[..., None], dist, np.inf)
    return qmax, np.argmin(key, axis=-1)


def dp_solve(env: EnvSpec, grid: GridSpec = GridSpec(), horizon: int = 50, chunk: int = 16) -> DpSolution:
    if not isinstance(env.alpha, MonoScale):
        raise UsageError("dp_solve supports mono-scale alpha only")
    if env.statics:
        raise UsageError("fix static parameters first (EnvSpec.with_statics_fixed)")
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    alphas = alpha_grid_for(env, grid)
    lws = symmetric_grid(grid.lw_bound, grid.n_lw)
    nodes, weights = gauss_hermite(grid.n_quad)
    gain, cost = step_rewards(env, alphas, lws, lws)
    dist = np.abs(lws[None, :] - lws[:, None])
    na, nw = alphas.size, lws.size
    values = np.zeros((horizon + 1, na, nw))
    act = np.zeros((horizon, na, nw), dtype=np.int32)
    rho, sigma = env.alpha.rho, env.alpha.sigma
    for h in range(1, horizon + 1):
        cont = continuation(values[h - 1], alphas, rho, sigma, nodes, weights)
        for s in range(0, na, chunk):
            e = min(s + chunk, na)
            q = (gain[s:e, None, :] - cost[None, :, :]) + cont[s:e, None, :]
            values[h, s:e], act[h - 1, s:e] = _best(q, dist)
    return DpSolution(alphas, lws, act, values, env, grid)


def myopic_optimum(alpha_total, env: EnvSpec):
    """Single-period optimal weight when trading is free."""
    if env.cost.l1_spread != 0 or env.cost.l2_coeff != 0:
        raise UsageError("myopic optimum is only exact for zero costs")
    a = np.asarray(alpha_total, dtype=np.float64)
    lam = env.risk.l2_lambda
    mw = env.risk.max_weight
    if mw is None:
        if lam <= 0:
            raise UsageError("unbounded problem: l2_lambda = 0 and no max weight")
        return a / lam
    # concave piecewise objective: stationary point inside [-M, M], else past the kink
    sign = np.sign(a)
    mag = np.abs(a)
    if lam > 0:
        inside = mag / lam
        outside = np.maximum((mag - mw.k) / lam, mw.m)
        w = np.where(inside <= mw.m, inside, outside)
    else:
        if np.any(mag > mw.k):
            raise UsageError("unbounded problem: |alpha| exceeds the max-weight penalty slope")
        w = np.where(mag > 0, mw.m, 0.0)
    return sign * w


def costless(env: EnvSpec) -> EnvSpec:
    return replace(env, cost=CostSpec(0.0, 0.0))


# -- policy comparison ---------------------------------------------------------


@dataclass(frozen=True)
class ProbeRegion:
    alpha_stds: float = 3.0
    lw_max: float = 4.0


@dataclass(frozen=True)
class PolicyComparison:
    action_rms: float
    reward_policy: float
    reward_dp: float
    stderr_gap: float
    n_probe: int

    @property
    def gap(self) -> float:
        return self.reward_dp - self.reward_policy

    @property
    def ratio(self) -> float:
        return self.reward_policy / self.reward_dp


def probe_points(dp: DpSolution, probe: ProbeRegion = ProbeRegion()) -> np.ndarray:
    std = float(dp.env.stationary_std()[0])
    a = dp.alpha_grid[np.abs(dp.alpha_grid) <= probe.alpha_stds * std + 1e-12]
    w = dp.lw_grid[np.abs(dp.lw_grid) <= probe.lw_max + 1e-12]
    aa, ww = np.meshgrid(a, w, indexing="ij")
    return np.column_stack([aa.ravel(), ww.ravel()])


def compare_policy(
    policy,
    dp: DpSolution,
    probe: ProbeRegion = ProbeRegion(),
    steps: int = 20_000,
    burn_in: int = 1_000,
    paths: int = 64,
    seed: int = 12345,
) -> PolicyComparison:
    """Action RMS on the probe region plus a common-noise steady-state reward gap."""
    from .analysis import paired_steady_state

    pts = probe_points(dp, probe)
    diff = np.asarray(policy(pts)) - dp(pts)
    rms = float(np.sqrt(np.mean(diff**2)))
    (r_pol, _), (r_dp, _), se_gap = paired_steady_state(policy, dp, dp.env, steps, burn_in, seed, paths)
    return PolicyComparison(rms, r_pol, r_dp, se_gap, len(pts))
