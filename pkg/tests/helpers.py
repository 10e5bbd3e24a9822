"""Independent reference computations shared by several test modules."""

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from ddrl.policy import PolicyParams, policy_forward
from ddrl.trainer import rollout_values


def brute_force_t2(env, alphas, lws, n_quad):
    """Two-step backward induction with plain loops and np.interp."""
    x, w = hermegauss(n_quad)
    w = w / w.sum()
    lam = env.risk.l2_lambda
    mw = env.risk.max_weight
    S, C = env.cost.l1_spread, env.cost.l2_coeff
    rho, sigma = env.alpha.rho, env.alpha.sigma

    def r(a, lw, act):
        risk = 0.5 * lam * act * act + (mw.k * max(abs(act) - mw.m, 0.0) if mw else 0.0)
        return act * a - risk - S * abs(act - lw) - C * (act - lw) ** 2

    na, nw = len(alphas), len(lws)
    v1 = np.array([[max(r(a, lw, act) for act in lws) for lw in lws] for a in alphas])
    v2 = np.empty((na, nw))
    a2 = np.empty((na, nw))
    margin = np.empty((na, nw))
    for i, a in enumerate(alphas):
        cont = [sum(wk * np.interp(rho * a + sigma * xk, alphas, v1[:, j]) for xk, wk in zip(x, w)) for j in range(nw)]
        for jl, lw in enumerate(lws):
            q = np.array([r(a, lw, act) + cont[ja] for ja, act in enumerate(lws)])
            order = np.sort(q)
            v2[i, jl] = order[-1]
            margin[i, jl] = order[-1] - order[-2]
            a2[i, jl] = lws[int(np.argmax(q))]
    return v1, v2, a2, margin


def hand_cr(params, alpha0, lw0, u, T, lam, S, rho, sigma, tape):
    """CR_T written out step by step: r_t = w a - lam/2 w^2 - S |w - lw|."""
    bound = params.bind(tape)
    a = alpha0
    lw = tape.leaf(lw0)
    total = None
    for t in range(T):
        x = tape.record("embed_column", [lw], [np.column_stack([a, np.zeros_like(a)]), 1])
        w = policy_forward(bound, x)
        r = w * a - (w * w) * (0.5 * lam) - abs(w - lw) * S
        total = r if total is None else total + r
        a = rho * a + sigma * u[:, t, 0]
        lw = w
    return bound, total


def fd_rollout_grad(arch, theta, states, noise, T, env, eps=1e-6):
    """Central differences of the batch-mean CR_T, evaluated without any tape."""
    g = np.empty_like(theta)
    for i in range(theta.size):
        d = np.zeros_like(theta)
        d[i] = eps
        up = rollout_values(PolicyParams.from_flat(arch, theta + d), states, noise, T, env).mean()
        dn = rollout_values(PolicyParams.from_flat(arch, theta - d), states, noise, T, env).mean()
        g[i] = (up - dn) / (2 * eps)
    return g
