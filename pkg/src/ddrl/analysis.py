"""Probing, simulating and summarising trained policies.

Every function takes a *policy*: any callable mapping a ``(n, input_dim)``
feature matrix to ``n`` actions (``PolicyParams``, ``DpSolution``, or a
plain function).  Outputs are small dataclasses with matching CSV writers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .diffcore import UsageError
from .envsim import EnvSpec, State, lift_static, reward, transition
from .oracle import costless, myopic_optimum

DEFAULT_EPS = 1e-2


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _static_matrix(env: EnvSpec, statics: dict | None, n: int) -> np.ndarray:
    statics = statics or {}
    missing = set(env.static_names) - set(statics)
    if missing:
        raise UsageError(f"values required for static parameters {sorted(missing)}")
    extra = set(statics) - set(env.static_names)
    if extra:
        raise UsageError(f"{sorted(extra)} are not static parameters of this env")
    return np.tile([float(statics[k]) for k in env.static_names], (n, 1)).reshape(n, len(env.statics))


def _features(env: EnvSpec, n: int, fixed: dict | None, **cols) -> np.ndarray:
    layout = lift_static(env)
    vals = dict(fixed or {})
    vals.update(cols)
    missing = [s for s in env.static_names if s not in vals]
    if missing:
        raise UsageError(f"values required for static parameters {missing}")
    return layout.assemble(n=n, **vals)


def half_life(rho: float) -> float:
    return -math.log(2.0) / math.log(rho)


# -- action curves and bands --------------------------------------------------


@dataclass
class ActionCurves:
    alpha: np.ndarray
    lw: np.ndarray
    actions: np.ndarray  # (n_lw, n_alpha)
    target: np.ndarray  # myopic costless optimum along the axis

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = _writer(fh)
            w.writerow(["alpha", "lw", "action"])
            for j, lw in enumerate(self.lw):
                for i, a in enumerate(self.alpha):
                    w.writerow([_fmt(a), _fmt(lw), _fmt(self.actions[j, i])])


def probe_action_curve(policy, env: EnvSpec, lw_values, alpha_axis, axis: str | None = None, fixed=None) -> ActionCurves:
    """Action along ``alpha_axis`` (feature ``axis``) for each last weight."""
    axis = axis or env.alpha.components[0]
    alpha_axis = np.asarray(alpha_axis, dtype=np.float64)
    lw_values = np.atleast_1d(np.asarray(lw_values, dtype=np.float64))
    n = alpha_axis.size
    acts = np.empty((lw_values.size, n))
    for j, lw in enumerate(lw_values):
        x = _features(env, n, fixed, **{axis: alpha_axis, "lw": lw})
        acts[j] = policy(x)
    x = _features(env, n, fixed, **{axis: alpha_axis})
    total = x[:, : env.n_components].sum(axis=1)
    try:
        target = myopic_optimum(total, costless(env))
    except UsageError:
        target = np.full(n, np.nan)
    return ActionCurves(alpha_axis, lw_values, acts, np.asarray(target))


@dataclass
class BandReport:
    lw: np.ndarray
    upper: np.ndarray  # NaN where the edge lies outside the alpha grid
    lower: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def at(self, lw: float) -> tuple[float, float]:
        j = int(np.argmin(np.abs(self.lw - lw)))
        return float(self.upper[j]), float(self.lower[j])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = _writer(fh)
            w.writerow(["lw", "upper", "lower"])
            for row in zip(self.lw, self.upper, self.lower):
                w.writerow([_fmt(v) for v in row])


def extract_bands(
    policy, env: EnvSpec, lw_values, alpha_axis, eps: float = DEFAULT_EPS, axis: str | None = None, fixed=None
) -> BandReport:
    """Trading bounds relative to the last weight.

    upper = min{alpha : A(alpha, lw) - lw > eps} - lw and
    lower = max{alpha : A(alpha, lw) - lw < -eps} - lw, scanned on the grid.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    curves = probe_action_curve(policy, env, lw_values, alpha_axis, axis, fixed)
    upper = np.full(curves.lw.size, np.nan)
    lower = np.full(curves.lw.size, np.nan)
    for j, lw in enumerate(curves.lw):
        trade = curves.actions[j] - lw
        buy = np.flatnonzero(trade > eps)
        sell = np.flatnonzero(trade < -eps)
        if buy.size:
            upper[j] = curves.alpha[buy[0]] - lw
        if sell.size:
            lower[j] = curves.alpha[sell[-1]] - lw
    return BandReport(curves.lw, upper, lower)


def no_trade_width(policy, env: EnvSpec, alpha_axis, lw: float = 0.0, eps: float = DEFAULT_EPS, **kw) -> float:
    """Length of the alpha interval where the policy holds, at one last weight."""
    rep = extract_bands(policy, env, [lw], alpha_axis, eps, **kw)
    return float(rep.width[0])


# -- simulation ---------------------------------------------------------------


@dataclass
class Trajectory:
    components: tuple[str, ...]
    alphas: np.ndarray  # (n, n_components)
    lw: np.ndarray
    weight: np.ndarray
    reward: np.ndarray
    t0: int = 0

    def __len__(self):
        return self.weight.size

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.t0, self.t0 + len(self))

    @property
    def alpha_total(self) -> np.ndarray:
        return self.alphas.sum(axis=1)

    @property
    def trade(self) -> np.ndarray:
        return self.weight - self.lw

    def series(self, name: str) -> np.ndarray:
        if name in self.components:
            return self.alphas[:, self.components.index(name)]
        if name == "alpha" and len(self.components) == 1:
            return self.alphas[:, 0]
        if name in ("alpha_total", "weight", "trade", "reward", "lw"):
            return getattr(self, name)
        raise UsageError(f"unknown trajectory series {name!r}")

    def to_csv(self, path) -> None:
        slow = self.alphas[:, 0]
        fast = self.alphas[:, 1] if self.alphas.shape[1] > 1 else np.zeros(len(self))
        with open(path, "w", newline="") as fh:
            w = _writer(fh)
            w.writerow(["t", "alpha_s", "alpha_f", "alpha_total", "weight", "trade", "reward"])
            for row in zip(self.t, slow, fast, self.alpha_total, self.weight, self.trade, self.reward):
                w.writerow([int(row[0])] + [_fmt(v) for v in row[1:]])


def _simulate(policy, env: EnvSpec, steps: int, seed: int, paths: int = 1, statics=None, record_state=True):
    """Roll ``paths`` independent chains; arrays are ``(steps, paths, ...)``."""
    layout = lift_static(env)
    rng = np.random.default_rng(seed)
    st = _static_matrix(env, statics, paths)
    sig = st[:, [env.static_names.index("sigma")]] if "sigma" in env.static_names else env.alpha.sigmas
    std = np.broadcast_to(env.stationary_std(sig), (paths, env.n_components))
    state = State(std * rng.standard_normal((paths, env.n_components)), np.zeros(paths), st)
    alphas = np.empty((steps, paths, env.n_components)) if record_state else None
    lws = np.empty((steps, paths)) if record_state else None
    ws = np.empty((steps, paths))
    rs = np.empty((steps, paths))
    for t in range(steps):
        w = np.asarray(policy(layout.features(state)), dtype=np.float64).reshape(paths)
        rs[t] = reward(state, w, env)
        ws[t] = w
        if record_state:
            alphas[t] = state.alphas
            lws[t] = state.lw
        state = transition(state, w, rng.standard_normal((paths, env.n_components)), env)
    return alphas, lws, ws, rs


def simulate_trajectory(policy, env: EnvSpec, steps: int, seed: int = 0, burn_in: int = 0, statics=None) -> Trajectory:
    """Single path of ``steps`` periods after discarding ``burn_in`` more."""
    if steps <= 0 or burn_in < 0:
        raise UsageError("need steps > 0 and burn_in >= 0")
    alphas, lws, ws, rs = _simulate(policy, env, steps + burn_in, seed, 1, statics)
    sl = slice(burn_in, None)
    return Trajectory(env.alpha.components, alphas[sl, 0], lws[sl, 0], ws[sl, 0], rs[sl, 0], t0=burn_in)


def _batch_means_se(x: np.ndarray, n_batches: int = 20) -> float:
    """Standard error of the grand mean from per-path batch means; ``x`` is (steps, paths)."""
    steps = x.shape[0]
    nb = max(2, min(n_batches, steps))
    size = steps // nb
    bm = x[: nb * size].reshape(nb, size, -1).mean(axis=1).ravel()
    return float(bm.std(ddof=1) / math.sqrt(bm.size))


def steady_state_reward(
    policy, env: EnvSpec, steps: int = 100_000, burn_in: int = 1_000, seed: int = 0, paths: int = 1, statics=None
) -> tuple[float, float]:
    """Mean per-step reward after burn-in, with a batch-means standard error.

    ``steps`` counts periods per path, burn-in included.
    """
    if steps < 10 * burn_in:
        raise UsageError("steps must be at least 10 * burn_in")
    _, _, _, rs = _simulate(policy, env, steps, seed, paths, statics, record_state=False)
    post = rs[burn_in:]
    return float(post.mean()), _batch_means_se(post)


def paired_steady_state(policy_a, policy_b, env, steps, burn_in, seed, paths=1, statics=None):
    """Both policies on one noise stream; also returns the SE of the reward difference."""
    if steps < 10 * burn_in:
        raise UsageError("steps must be at least 10 * burn_in")
    ra = _simulate(policy_a, env, steps, seed, paths, statics, record_state=False)[3][burn_in:]
    rb = _simulate(policy_b, env, steps, seed, paths, statics, record_state=False)[3][burn_in:]
    return (
        (float(ra.mean()), _batch_means_se(ra)),
        (float(rb.mean()), _batch_means_se(rb)),
        _batch_means_se(ra - rb),
    )


# -- correlations and heat-maps ----------------------------------------------

TABLE_SERIES = ("alpha_s", "alpha_f", "weight", "trade")
LOW_SAMPLE = 100_000


@dataclass
class CorrelationMatrix:
    labels: tuple[str, ...]
    values: np.ndarray  # NaN only on rows/columns listed in ``undefined``
    undefined: tuple[str, ...]
    n: int

    @property
    def low_sample(self) -> bool:
        return self.n < LOW_SAMPLE

    def __getitem__(self, pair) -> float:
        a, b = pair
        return float(self.values[self.labels.index(a), self.labels.index(b)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = _writer(fh)
            w.writerow(["row", "col", "value"])
            for i, a in enumerate(self.labels):
                for j, b in enumerate(self.labels):
                    v = self.values[i, j]
                    w.writerow([a, b, "undefined" if np.isnan(v) else repr(float(v))])
            if self.low_sample:
                w.writerow(["n", "low_sample", str(self.n)])


def correlation_matrix(traj: Trajectory, components=TABLE_SERIES) -> CorrelationMatrix:
    """Pearson correlations; zero-variance series are flagged rather than NaN-poisoning the rest."""
    labels = tuple(components)
    data = np.column_stack([traj.series(c) for c in labels])
    n, k = data.shape
    centred = data - data.mean(axis=0)
    sd = np.sqrt((centred**2).mean(axis=0))
    ok = sd > 1e-12 * (1.0 + np.abs(data).max(axis=0))
    z = np.zeros_like(centred)
    z[:, ok] = centred[:, ok] / sd[ok]
    c = z.T @ z / n
    c = (c + c.T) / 2.0
    np.fill_diagonal(c, 1.0)
    c[~ok, :] = np.nan
    c[:, ~ok] = np.nan
    return CorrelationMatrix(labels, c, tuple(l for l, good in zip(labels, ok) if not good), n)


CLASS_NAMES = {-1: "sell", 0: "hold", 1: "buy"}


@dataclass
class Heatmap:
    slow: np.ndarray
    short_term: np.ndarray
    classes: np.ndarray  # (n_short, n_slow) in {-1, 0, 1}
    actions: np.ndarray
    lw: float

    def hold_area(self) -> int:
        return int(np.sum(self.classes == 0))

    def rows_monotone(self) -> bool:
        return bool(np.all(np.diff(self.classes, axis=1) >= 0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = _writer(fh)
            w.writerow(["slow", "short_term", "class", "action"])
            for i, st in enumerate(self.short_term):
                for j, sl in enumerate(self.slow):
                    w.writerow([_fmt(sl), _fmt(st), CLASS_NAMES[int(self.classes[i, j])], _fmt(self.actions[i, j])])


def no_trade_heatmap(
    policy, env: EnvSpec, slow_axis, short_axis, lw: float = 0.0, eps: float = DEFAULT_EPS, fixed=None
) -> Heatmap:
    """Sell / hold / buy classes over (slow alpha, short-term alpha = slow + fast)."""
    if env.is_mono:
        raise UsageError("heat-map needs a two-scale environment")
    slow = np.asarray(slow_axis, dtype=np.float64)
    short = np.asarray(short_axis, dtype=np.float64)
    ss, tt = np.meshgrid(slow, short)
    x = _features(env, ss.size, fixed, alpha_s=ss.ravel(), alpha_f=(tt - ss).ravel(), lw=lw)
    acts = np.asarray(policy(x)).reshape(tt.shape)
    trade = acts - lw
    classes = np.where(trade > eps, 1, np.where(trade < -eps, -1, 0))
    return Heatmap(slow, short, classes, acts, lw)


# -- horizon study --------------------------------------------------------------


@dataclass
class HorizonTable:
    horizon: np.ndarray
    reward: np.ndarray
    stderr: np.ndarray
    half_life: float | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = _writer(fh)
            w.writerow(["T", "reward", "stderr"])
            for row in zip(self.horizon, self.reward, self.stderr):
                w.writerow([int(row[0]), _fmt(row[1]), _fmt(row[2])])


def reward_vs_horizon(env, arch, config, horizons, steps=20_000, burn_in=1_000, paths=64, seed=777, statics=None):
    """Train one policy per horizon and score each by steady-state reward on common noise."""
    from .trainer import train

    horizons = list(horizons)
    if horizons != sorted(horizons):
        raise UsageError("horizons must be ascending")
    rows = []
    policies = {}
    for T in horizons:
        params, _ = train(env, arch, replace(config, horizon=T))
        policies[T] = params
        rows.append(steady_state_reward(params, env, steps, burn_in, seed, paths, statics))
    hl = half_life(env.alpha.rhos[0]) if env.alpha.rhos[0] > 0 else None
    table = HorizonTable(np.array(horizons), np.array([r[0] for r in rows]), np.array([r[1] for r in rows]), hl)
    return table, policies
