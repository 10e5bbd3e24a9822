import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from ddrl.diffcore import NumericError, Tape, UsageError, grad_check, relu
from ddrl.envsim import preset, sample_initial_states, sample_noise
from ddrl.policy import Architecture, BoundParams, init_policy, policy_forward
from ddrl.trainer import build_rollout


def fd4(f, x, h=1e-3):
    """Fourth-order central difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        def at(d):
            y = x.copy()
            y[i] += d
            return f(y)
        g[i] = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
    return g


def test_record_examples():
    t = Tape()
    x, y = t.leaf(2.0), t.leaf(3.0)
    assert float(t.record("add", [x, y]).value) == 5.0
    assert float(t.record("relu", [t.leaf(-1.5)]).value) == 0.0
    z = t.leaf(0.0)
    a = t.record("abs", [z])
    assert float(a.value) == 0.0
    assert float(t.backward(a)[z]) == 0.0


def test_relu_kink_has_zero_derivative():
    t = Tape()
    z = t.leaf(0.0)
    assert float(t.backward(relu(z))[z]) == 0.0


def test_backward_examples():
    t = Tape()
    x = t.leaf(5.0)
    assert float(t.backward(3 * x + 2)[x]) == 3.0
    t = Tape()
    x = t.leaf(4.0)
    assert float(t.backward(x * x)[x]) == 8.0
    t = Tape()
    x = t.leaf(-2.0)
    assert float(t.backward(relu(x))[x]) == 0.0


def test_backward_requires_scalar():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        t.backward(x * 2.0)


def test_mixed_tapes_rejected():
    a, b = Tape(), Tape()
    with pytest.raises(UsageError):
        a.leaf(1.0) + b.leaf(2.0)


def test_non_finite_names_the_op():
    t = Tape()
    with pytest.raises(NumericError, match="div"):
        t.leaf(1.0) / t.leaf(0.0)
    with pytest.raises(NumericError):
        t.leaf(np.inf)


def test_shape_mismatch_rejected():
    t = Tape()
    with pytest.raises(UsageError):
        t.leaf([1.0, 2.0]) + t.leaf([1.0, 2.0, 3.0])


def test_unreached_node_gets_zero():
    t = Tape()
    x, y = t.leaf(1.5), t.leaf(2.5)
    stray = y * y
    out = x * 3.0
    g = t.backward(out)
    assert float(g[y]) == 0.0
    assert float(g[stray]) == 0.0
    assert float(g[x]) == 3.0


def test_inputs_precede_node_index():
    t = Tape()
    x = t.leaf([0.3, -0.2])
    y = relu(x * x - 0.01) + abs(x)
    t.backward(t.record("sum", [y]))
    for i, node in enumerate(t.nodes):
        assert all(j < i for j in node.inputs)


def test_grad_check_quadratic():
    assert grad_check(lambda x: t_sum(x * x), [3.0], eps=1e-5) < 1e-8


def t_sum(v):
    return v.tape.record("sum", [v])


def test_grad_check_small_mlp():
    arch = Architecture(1, (3,))
    assert arch.n_params == 10
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(5, 1))
    theta = rng.normal(size=arch.n_params)

    def f(th):
        out = policy_forward(BoundParams.from_flat(arch, th), th.tape.leaf(feats))
        return th.tape.record("sum", [out])

    t = Tape()
    f(t.leaf(theta))
    assert t.kink_margin() > 1e-3
    assert grad_check(f, theta, eps=1e-5) < 1e-4


def test_grad_check_two_step_rollout():
    env = preset("mono_l1")
    arch = Architecture(2, (4,))
    rng = np.random.default_rng(11)
    states = sample_initial_states(env, 3, rng)
    noise = sample_noise(env, 3, 2, rng)
    theta = init_policy(arch, 5).flat()

    def cr2(th):
        _, cr = build_rollout(BoundParams.from_flat(arch, th), states, noise, 2, env, th.tape)
        return th.tape.record("mean", [cr])

    t = Tape()
    cr2(t.leaf(theta))
    assert t.kink_margin() > 1e-4
    assert grad_check(cr2, theta, eps=1e-5) < 1e-4


def test_tape_size_linear_in_horizon():
    env = preset("twoscale_l1")
    arch = Architecture(3, (4, 4))
    params = init_policy(arch, 0)
    rng = np.random.default_rng(0)
    states = sample_initial_states(env, 2, rng)
    noise = sample_noise(env, 2, 40, rng)
    sizes = []
    for T in (10, 20, 40):
        t = Tape()
        build_rollout(params, states, noise, T, env, t)
        sizes.append(len(t))
    per_step = (sizes[1] - sizes[0]) / 10
    assert sizes[2] - sizes[1] == 20 * per_step


# -- random graph properties -------------------------------------------------

UNARY = ["neg", "relu", "abs", "square", "scale", "shift"]
BINARY = ["add", "sub", "mul", "div"]


def build_graph(ops, x):
    """Replay an op list over the entries of the 1-d leaf ``x``; returns a scalar Var."""
    t = x.tape
    pool = [t.record("slice", [x], [i, i + 1]) for i in range(x.value.size)]
    for kind, i, j, c in ops:
        a = pool[i % len(pool)]
        b = pool[j % len(pool)]
        if kind in ("scale", "shift"):
            pool.append(t.record(kind, [a], [c]))
        elif kind == "div":
            # keep the denominator away from zero
            pool.append(a / (b * b + 1.0))
        elif kind in BINARY:
            pool.append(t.record(kind, [a, b]))
        else:
            pool.append(t.record(kind, [a]))
    return t.record("sum", [pool[-1]])


graph_ops = st.lists(
    st.tuples(
        st.sampled_from(UNARY + BINARY),
        st.integers(0, 50),
        st.integers(0, 50),
        st.floats(-2, 2, allow_nan=False),
    ),
    min_size=1,
    max_size=10,
)
points = st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(graph_ops, points)
def test_random_graph_matches_finite_differences(ops, pt):
    pt = np.array(pt)
    t = Tape()
    x = t.leaf(pt)
    out = build_graph(ops, x)
    assume(t.kink_margin() > 1e-2)
    assume(abs(float(out.value)) < 1e4)
    ad = t.backward(out)[x]

    def f(p):
        return float(build_graph(ops, Tape().leaf(p)).value)

    fd = fd4(f, pt, h=1e-3)
    rel = np.abs(ad - fd) / (np.abs(fd) + 1e-12)
    # coordinates with no influence are exactly zero on both sides
    assert np.all((rel < 1e-6) | (np.abs(ad - fd) < 1e-10))


@settings(max_examples=100, deadline=None)
@given(graph_ops, graph_ops, points, st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(ops_f, ops_g, pt, a, b):
    pt = np.array(pt)
    t = Tape()
    x = t.leaf(pt)
    f = build_graph(ops_f, x)
    g = build_graph(ops_g, x)
    assume(abs(float(f.value)) < 1e6 and abs(float(g.value)) < 1e6)
    combo = t.backward(a * f + b * g)[x]
    gf = t.backward(f)[x]
    gg = t.backward(g)[x]
    np.testing.assert_allclose(combo, a * gf + b * gg, rtol=1e-12, atol=1e-12 * (1 + np.abs(combo).max()))
