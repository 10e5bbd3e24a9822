"""Direct policy optimisation through unrolled rollouts.

The loss for a mini-batch is ``-mean_i CR_T^i`` where ``CR_T`` is the sum
of ``T`` rewards along a rollout driven by the policy itself.  Because the
transition threads the action into the next last weight, one backward pass
over the fused batch graph yields the exact gradient through time.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffcore import NumericError, Tape, UsageError, mean
from .envsim import EnvSpec, State, lift_static, reward, sample_initial_states, sample_noise, transition
from .policy import Architecture, BoundParams, PolicyParams, init_policy, policy_forward

log = logging.getLogger(__name__)

# Hidden widths used for desk-scale runs; the full-scale network is (300, 300).
DESK_HIDDEN = (64, 64)


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = 50
    total_samples: int = 10_000_000
    batch_size: int = 1024
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_per_epoch: float = 0.10
    seed: int = 0
    reproducible_reduction: bool = True
    log_every: int = 100

    def __post_init__(self):
        if self.horizon < 1:
            raise UsageError("horizon must be >= 1")
        if not 1 <= self.batch_size <= self.total_samples:
            raise UsageError("need 1 <= batch_size <= total_samples")
        if not 0 <= self.lr_decay_per_epoch < 1:
            raise UsageError("lr_decay_per_epoch must lie in [0, 1)")
        if self.epochs < 1 or self.lr <= 0:
            raise UsageError("epochs must be >= 1 and lr > 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """500k samples, 5 epochs: minutes instead of hours."""
        return cls(**{"total_samples": 500_000, "epochs": 5, **overrides})

    def lr_at(self, epoch: int) -> float:
        return self.lr * (1.0 - self.lr_decay_per_epoch) ** epoch

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


@dataclass
class TrainingCurve:
    batch_index: list[int] = field(default_factory=list)
    mean_cr: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.batch_index)

    def append(self, k, cr, lr):
        self.batch_index.append(k)
        self.mean_cr.append(cr)
        self.lr.append(lr)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["batch_index", "mean_cr", "lr"])
            for row in zip(self.batch_index, self.mean_cr, self.lr):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def _check_noise(noise, states: State, horizon: int, env: EnvSpec) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    n = states.alphas.shape[0]
    if noise.ndim != 3 or noise.shape[0] != n or noise.shape[1] < horizon or noise.shape[2] != env.n_components:
        raise UsageError(
            f"noise must have shape ({n}, >= {horizon}, {env.n_components}), got {noise.shape}"
        )
    return noise


def build_rollout(params, states: State, noise, horizon: int, env: EnvSpec, tape: Tape):
    """Record ``T`` policy/env steps on ``tape``; returns (bound params, per-sample CR Var)."""
    layout = lift_static(env)
    bound = params if isinstance(params, BoundParams) else params.bind(tape)
    state = states
    cr = None
    for t in range(horizon):
        w = policy_forward(bound, layout.features(state))
        r = reward(state, w, env)
        cr = r if cr is None else cr + r
        if t + 1 < horizon:
            state = transition(state, w, noise[:, t, :], env)
    return bound, cr


def rollout_values(params: PolicyParams, states: State, noise, horizon: int, env: EnvSpec) -> np.ndarray:
    """Per-sample ``CR_T`` with plain arrays (no tape)."""
    noise = _check_noise(noise, states, horizon, env)
    layout = lift_static(env)
    state = State(states.alphas, np.asarray(states.lw, dtype=np.float64), states.statics)
    cr = np.zeros(states.alphas.shape[0])
    with np.errstate(all="ignore"):
        for t in range(horizon):
            w = params(layout.features(state))
            cr = cr + reward(state, w, env)
            if t + 1 < horizon:
                state = transition(state, w, noise[:, t, :], env)
    return cr


def rollout_cr(params: PolicyParams, states: State, noise, horizon: int, env: EnvSpec):
    """Batch-mean cumulative reward and its gradient w.r.t. the flat parameters."""
    noise = _check_noise(noise, states, horizon, env)
    tape = Tape()
    try:
        bound, cr = build_rollout(params, states, noise, horizon, env, tape)
        grads = tape.backward(mean(cr))
    except NumericError as exc:
        bad = np.flatnonzero(~np.isfinite(rollout_values(params, states, noise, horizon, env)))
        where = f" at sample {int(bad[0])}" if bad.size else ""
        raise NumericError(f"rollout produced a non-finite value{where}: {exc}") from exc
    grad = bound.flat_grad(grads)
    if not np.all(np.isfinite(grad)):
        raise NumericError("rollout gradient is non-finite")
    return float(np.mean(cr.value)), grad


def adam_step(theta, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update (descent on ``grads``)."""
    theta = np.asarray(theta, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if theta.shape != grads.shape or state.m.shape != theta.shape:
        raise UsageError("adam_step: shape mismatch")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    if not np.all(np.isfinite(new)):
        raise NumericError("adam_step produced non-finite parameters")
    return new, AdamState(m, v, step)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch + 1])


def train(env: EnvSpec, arch: Architecture, config: TrainConfig, params: PolicyParams | None = None):
    """Fit a policy by Adam on ``-mean(CR_T)``; returns (params, curve)."""
    layout = lift_static(env)
    if arch.input_dim != layout.input_dim:
        raise UsageError(f"architecture input_dim {arch.input_dim} != env features {layout.input_dim}")
    if params is None:
        params = init_policy(arch, config.seed)
    theta = params.flat()
    adam = AdamState.zeros(theta.size)
    curve = TrainingCurve()
    k = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        rng = epoch_rng(config.seed, epoch)
        done = 0
        while done < config.total_samples:
            b = min(config.batch_size, config.total_samples - done)
            states = sample_initial_states(env, b, rng)
            noise = sample_noise(env, b, config.horizon, rng)
            try:
                cr, grad = rollout_cr(params, states, noise, config.horizon, env)
                theta, adam = adam_step(theta, -grad, adam, lr, config.beta1, config.beta2, config.adam_eps)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {k}: {exc}") from exc
            params = PolicyParams.from_flat(arch, theta)
            curve.append(k, cr, lr)
            if config.log_every and k % config.log_every == 0:
                log.info("epoch %d batch %d mean CR %.4f lr %.2e", epoch, k, cr, lr)
            k += 1
            done += b
    return params, curve


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
