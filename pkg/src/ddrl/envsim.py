"""Differentiable trading environments.

State = (alpha components, last weight, static parameters).  Reward is
``w * alpha_total - risk(w) - cost(w, lw)``; the alpha components follow
independent AR(1) laws, and the next last weight is the action itself.

All functions accept plain arrays or :class:`~ddrl.diffcore.Var` for the
action, so the same code serves simulation and back-propagation.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from .diffcore import UsageError, Var, embed_column, relu, value_of

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


# -- specification types -----------------------------------------------------


@dataclass(frozen=True)
class MonoScale:
    rho: float
    sigma: float

    def __post_init__(self):
        _check_ar1(self.rho, self.sigma)

    @property
    def components(self) -> tuple[str, ...]:
        return ("alpha",)

    @property
    def rhos(self) -> np.ndarray:
        return np.array([self.rho])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma])


@dataclass(frozen=True)
class TwoScale:
    rho_s: float
    sigma_s: float
    rho_f: float
    sigma_f: float

    def __post_init__(self):
        _check_ar1(self.rho_s, self.sigma_s)
        _check_ar1(self.rho_f, self.sigma_f)

    @property
    def components(self) -> tuple[str, ...]:
        return ("alpha_s", "alpha_f")

    @property
    def rhos(self) -> np.ndarray:
        return np.array([self.rho_s, self.rho_f])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma_s, self.sigma_f])


AlphaModel = Union[MonoScale, TwoScale]


def _check_ar1(rho, sigma):
    if not abs(rho) < 1:
        raise UsageError(f"AR(1) persistence must satisfy |rho| < 1, got {rho}")
    if sigma < 0:
        raise UsageError(f"AR(1) volatility must be >= 0, got {sigma}")


@dataclass(frozen=True)
class MaxWeight:
    m: float
    k: float

    def __post_init__(self):
        if self.m <= 0 or self.k <= 0:
            raise UsageError("max_weight needs m > 0 and k > 0")


@dataclass(frozen=True)
class RiskSpec:
    l2_lambda: float = 0.0
    max_weight: MaxWeight | None = None

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise UsageError("l2_lambda must be >= 0")
        if self.l2_lambda == 0 and self.max_weight is None:
            raise UsageError("risk needs l2_lambda > 0 or a max_weight penalty")


@dataclass(frozen=True)
class CostSpec:
    l1_spread: float = 0.0
    l2_coeff: float = 0.0

    def __post_init__(self):
        if self.l1_spread < 0 or self.l2_coeff < 0:
            raise UsageError("cost coefficients must be >= 0")


STATIC_NAMES = ("sigma", "l1_spread")


@dataclass(frozen=True)
class StaticParamDecl:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if self.name not in STATIC_NAMES:
            raise UsageError(f"unknown static parameter {self.name!r}; expected one of {STATIC_NAMES}")
        if not self.lo <= self.hi:
            raise UsageError(f"static {self.name}: lo > hi")


@dataclass(frozen=True)
class EnvSpec:
    alpha: AlphaModel
    risk: RiskSpec
    cost: CostSpec = CostSpec()
    statics: tuple[StaticParamDecl, ...] = ()
    lw_init_range: tuple[float, float] = (-6.0, 6.0)

    def __post_init__(self):
        object.__setattr__(self, "statics", tuple(self.statics))
        object.__setattr__(self, "lw_init_range", tuple(float(x) for x in self.lw_init_range))
        lo, hi = self.lw_init_range
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise UsageError(f"bad lw_init_range {self.lw_init_range}")
        names = [s.name for s in self.statics]
        if len(set(names)) != len(names):
            raise UsageError("duplicate static declaration")
        if "sigma" in names and not isinstance(self.alpha, MonoScale):
            raise UsageError("static 'sigma' requires a mono-scale alpha")

    @property
    def n_components(self) -> int:
        return len(self.alpha.components)

    @property
    def is_mono(self) -> bool:
        return isinstance(self.alpha, MonoScale)

    @property
    def static_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.statics)

    def with_statics_fixed(self, **values) -> "EnvSpec":
        """Drop static declarations, baking the given point values into the spec."""
        env = self
        for name, v in values.items():
            if name not in self.static_names:
                raise UsageError(f"{name!r} is not a declared static")
            if name == "sigma":
                env = replace(env, alpha=replace(env.alpha, sigma=float(v)))
            else:
                env = replace(env, cost=replace(env.cost, l1_spread=float(v)))
        missing = set(self.static_names) - set(values)
        if missing:
            raise UsageError(f"no value given for statics {sorted(missing)}")
        return replace(env, statics=())

    def stationary_std(self, sigmas=None) -> np.ndarray:
        sig = self.alpha.sigmas if sigmas is None else sigmas
        return sig / np.sqrt(1.0 - self.alpha.rhos**2)

    def spec_hash(self) -> str:
        blob = json.dumps(env_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- state and feature layout ------------------------------------------------


@dataclass
class State:
    """Batched environment state.

    ``alphas`` has shape ``(..., n_components)``; ``lw`` has the leading
    shape (or is a ``Var`` of it); ``statics`` is ``(..., n_statics)``.
    """

    alphas: np.ndarray
    lw: object
    statics: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def alpha_total(self) -> np.ndarray:
        return self.alphas.sum(axis=-1)

    def static(self, name: str, env: EnvSpec):
        return self.statics[..., env.static_names.index(name)]


@dataclass(frozen=True)
class FeatureLayout:
    names: tuple[str, ...]

    @property
    def input_dim(self) -> int:
        return len(self.names)

    @property
    def lw_index(self) -> int:
        return self.names.index("lw")

    def features(self, state: State):
        """Network input for a batched state (a ``Var`` when lw is one)."""
        lw_val = value_of(state.lw)
        n = lw_val.shape[0]
        cols = [state.alphas[:, k] for k in range(state.alphas.shape[1])]
        cols.append(lw_val)
        cols += [state.statics[:, k] for k in range(state.statics.shape[-1])] if state.statics.size else []
        x = np.stack(cols, axis=1).reshape(n, self.input_dim)
        if isinstance(state.lw, Var):
            return embed_column(x, state.lw, self.lw_index)
        return x

    def assemble(self, n: int | None = None, **values) -> np.ndarray:
        """Feature matrix from named columns; scalars broadcast, missing names are 0."""
        unknown = set(values) - set(self.names)
        if unknown:
            raise UsageError(f"unknown feature(s) {sorted(unknown)}; layout is {self.names}")
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}
        if n is None:
            sizes = [a.size for a in arrays.values() if a.ndim > 0]
            n = max(sizes) if sizes else 1
        x = np.zeros((n, self.input_dim))
        for k, a in arrays.items():
            x[:, self.names.index(k)] = np.broadcast_to(a.ravel() if a.ndim else a, (n,))
        return x


def lift_static(env: EnvSpec) -> FeatureLayout:
    """Feature ordering: alpha components, last weight, declared statics."""
    for s in env.statics:
        if s.name == "sigma" and not env.is_mono:
            raise UsageError("static 'sigma' is only defined for mono-scale alpha")
    return FeatureLayout(env.alpha.components + ("lw",) + env.static_names)


# -- dynamics and reward ------------------------------------------------------


def _sigmas(state: State, env: EnvSpec) -> np.ndarray:
    if "sigma" in env.static_names:
        return state.static("sigma", env)[..., None]
    return env.alpha.sigmas


def transition(state: State, w, noise, env: EnvSpec) -> State:
    """Advance alphas one AR(1) step; the action becomes the next last weight."""
    noise = np.asarray(noise, dtype=np.float64)
    alphas = env.alpha.rhos * state.alphas + _sigmas(state, env) * noise
    return State(alphas, w, state.statics)


def risk_term(w, spec: RiskSpec):
    out = 0.0
    if spec.l2_lambda > 0:
        out = out + (0.5 * spec.l2_lambda) * (w * w)
    if spec.max_weight is not None:
        out = out + spec.max_weight.k * relu(abs(w) - spec.max_weight.m)
    return out


def cost_term(w, lw, spec: CostSpec, spread=None):
    """``S|w - lw| + C (w - lw)^2``; ``spread`` overrides ``S`` (per sample)."""
    s = spec.l1_spread if spread is None else spread
    trade = w - lw
    out = 0.0
    if spread is not None or s > 0:
        out = out + abs(trade) * s
    if spec.l2_coeff > 0:
        out = out + spec.l2_coeff * (trade * trade)
    return out


def reward(state: State, w, env: EnvSpec):
    spread = state.static("l1_spread", env) if "l1_spread" in env.static_names else None
    return w * state.alpha_total - risk_term(w, env.risk) - cost_term(w, state.lw, env.cost, spread)


# -- sampling -----------------------------------------------------------------


def sample_initial_states(env: EnvSpec, n: int, rng: np.random.Generator) -> State:
    """Statics uniform on their ranges, alphas from the stationary law, lw uniform."""
    if n < 1:
        raise UsageError("n must be >= 1")
    statics = np.empty((n, len(env.statics)))
    for k, s in enumerate(env.statics):
        statics[:, k] = rng.uniform(s.lo, s.hi, size=n)
    if "sigma" in env.static_names:
        sig = statics[:, env.static_names.index("sigma")][:, None]
    else:
        sig = env.alpha.sigmas[None, :]
    std = sig / np.sqrt(1.0 - env.alpha.rhos**2)
    alphas = std * rng.standard_normal((n, env.n_components))
    lw = rng.uniform(*env.lw_init_range, size=n)
    return State(alphas, lw, statics)


def sample_noise(env: EnvSpec, n: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. standard normals of shape ``(n, horizon, n_components)``."""
    return rng.standard_normal((n, horizon, env.n_components))


# -- configuration files and presets -----------------------------------------


def env_to_dict(env: EnvSpec) -> dict:
    if env.is_mono:
        alpha = {"rho": env.alpha.rho, "sigma": env.alpha.sigma}
    else:
        a = env.alpha
        alpha = {"rho_s": a.rho_s, "sigma_s": a.sigma_s, "rho_f": a.rho_f, "sigma_f": a.sigma_f}
    risk = {"l2_lambda": env.risk.l2_lambda}
    if env.risk.max_weight is not None:
        risk["max_weight"] = {"m": env.risk.max_weight.m, "k": env.risk.max_weight.k}
    return {
        "alpha": alpha,
        "risk": risk,
        "cost": {"l1_spread": env.cost.l1_spread, "l2_coeff": env.cost.l2_coeff},
        "statics": {s.name: [s.lo, s.hi] for s in env.statics},
        "lw_init_range": list(env.lw_init_range),
    }


def env_from_dict(d: dict) -> EnvSpec:
    d = copy.deepcopy(d)
    known = {"alpha", "risk", "cost", "statics", "lw_init_range"}
    extra = set(d) - known
    if extra:
        raise UsageError(f"unknown config section(s) {sorted(extra)}")
    alpha = d.get("alpha", {})
    try:
        if "rho" in alpha or "sigma" in alpha:
            model = MonoScale(float(alpha.pop("rho")), float(alpha.pop("sigma")))
        else:
            model = TwoScale(
                float(alpha.pop("rho_s")),
                float(alpha.pop("sigma_s")),
                float(alpha.pop("rho_f")),
                float(alpha.pop("sigma_f")),
            )
    except KeyError as exc:
        raise UsageError(f"alpha.{exc.args[0]} is required") from None
    if alpha:
        raise UsageError(f"unknown key(s) alpha.{', alpha.'.join(sorted(alpha))}")
    risk = dict(d.get("risk", {}))
    mw = risk.pop("max_weight", None)
    if mw is not None:
        mw = MaxWeight(float(mw["m"]), float(mw["k"]))
    lam = float(risk.pop("l2_lambda", 0.0))
    if risk:
        raise UsageError(f"unknown key(s) risk.{', risk.'.join(sorted(risk))}")
    cost = dict(d.get("cost", {}))
    cost_spec = CostSpec(float(cost.pop("l1_spread", 0.0)), float(cost.pop("l2_coeff", 0.0)))
    if cost:
        raise UsageError(f"unknown key(s) cost.{', cost.'.join(sorted(cost))}")
    statics = tuple(
        StaticParamDecl(name, float(rng[0]), float(rng[1])) for name, rng in d.get("statics", {}).items()
    )
    kwargs = {}
    if "lw_init_range" in d:
        kwargs["lw_init_range"] = tuple(d["lw_init_range"])
    return EnvSpec(model, RiskSpec(lam, mw), cost_spec, statics, **kwargs)


def load_env_config(path) -> EnvSpec:
    with open(path, "rb") as fh:
        return env_from_dict(tomllib.load(fh))


def env_to_toml(env: EnvSpec) -> str:
    d = env_to_dict(env)
    lines = [f"lw_init_range = [{d['lw_init_range'][0]!r}, {d['lw_init_range'][1]!r}]", ""]
    for section in ("alpha", "risk", "cost", "statics"):
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            if isinstance(v, dict):
                inner = ", ".join(f"{ik} = {iv!r}" for ik, iv in v.items())
                lines.append(f"{k} = {{{inner}}}")
            elif isinstance(v, list):
                lines.append(f"{k} = [{v[0]!r}, {v[1]!r}]")
            else:
                lines.append(f"{k} = {v!r}")
        lines.append("")
    return "\n".join(lines)


def _preset_table() -> dict[str, EnvSpec]:
    mono = MonoScale(rho=0.9, sigma=1.0)
    two = TwoScale(rho_s=0.9, sigma_s=1.0, rho_f=0.0, sigma_f=3.0)
    l2 = RiskSpec(l2_lambda=1.0)
    spread4 = CostSpec(l1_spread=4.0)
    return {
        "mono_l1": EnvSpec(mono, l2, spread4),
        "mono_maxw": EnvSpec(
            mono, RiskSpec(0.0, MaxWeight(m=3.0, k=10.0)), spread4, lw_init_range=(-4.0, 4.0)
        ),
        "mono_varsigma": EnvSpec(
            mono, l2, spread4, (StaticParamDecl("sigma", 0.0, 4.0),), lw_init_range=(-8.0, 8.0)
        ),
        "twoscale_l1": EnvSpec(two, l2, spread4, lw_init_range=(-8.0, 8.0)),
        "twoscale_varspread": EnvSpec(
            two, l2, spread4, (StaticParamDecl("l1_spread", 0.0, 6.0),), lw_init_range=(-10.0, 10.0)
        ),
    }


PRESETS = tuple(_preset_table())


def preset(name: str) -> EnvSpec:
    table = _preset_table()
    if name not in table:
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return table[name]


def resolve_env(name_or_path: str) -> EnvSpec:
    """Preset name or path to a TOML environment file."""
    if name_or_path in PRESETS:
        return preset(name_or_path)
    p = Path(name_or_path)
    if p.exists():
        return load_env_config(p)
    raise UsageError(f"unknown preset {name_or_path!r}; available: {', '.join(PRESETS)}")
