import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddrl.diffcore import Tape, UsageError
from ddrl.policy import (
    Architecture,
    PolicyParams,
    init_policy,
    load_checkpoint,
    policy_forward,
    save_checkpoint,
    zero_policy,
)


def test_parameter_counts():
    assert Architecture(2, (300, 300)).n_params == 91_501
    assert Architecture(3, (4,)).n_params == 21


@given(st.integers(1, 6), st.lists(st.integers(1, 20), min_size=0, max_size=3))
def test_parameter_count_matches_shapes(d, hidden):
    arch = Architecture(d, tuple(hidden))
    p = init_policy(arch, 0)
    assert p.flat().size == arch.n_params
    dims = [d, *hidden, 1]
    assert arch.n_params == sum((a + 1) * b for a, b in zip(dims[:-1], dims[1:]))


def test_init_is_deterministic_and_fan_in_bounded():
    arch = Architecture(2, (30, 30))
    a, b = init_policy(arch, 3), init_policy(arch, 3)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), init_policy(arch, 4).flat())
    for w, bias in zip(a.weights, a.biases):
        assert np.all(np.abs(w) <= 1 / np.sqrt(w.shape[0]))
        assert np.all(bias == 0)


def test_zero_network_outputs_zero():
    p = zero_policy(Architecture(2))
    assert p(np.array([1.3, -2.0])) == 0.0


def test_one_unit_hand_computation():
    arch = Architecture(1, (1,))
    p = PolicyParams.from_flat(arch, np.array([1.0, 0.0, 1.0, 0.0]))
    assert p(np.array([2.0])) == 2.0
    assert p(np.array([-2.0])) == 0.0


def test_dimension_mismatch():
    p = init_policy(Architecture(2, (3,)), 0)
    with pytest.raises(UsageError):
        p(np.zeros(3))


def test_taped_and_plain_forward_identical():
    arch = Architecture(3, (17, 9))
    p = init_policy(arch, 1)
    x = np.random.default_rng(2).normal(size=(50, 3)) * 3
    plain = policy_forward(p, x)
    taped = policy_forward(p, x, tape=Tape())
    np.testing.assert_array_equal(plain, taped.value)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_piecewise_linear_along_segments(seed):
    rng = np.random.default_rng(seed)
    p = init_policy(Architecture(2, (8, 8)), seed)
    a, b = rng.normal(size=2) * 3, rng.normal(size=2) * 3
    s = np.linspace(0, 1, 401)
    y = p(a[None, :] + s[:, None] * (b - a)[None, :])
    second = np.abs(np.diff(y, 2))
    scale = 1e-9 * (1 + np.abs(y).max())
    # each kink of a 16-unit net can spoil at most two consecutive second differences
    assert np.sum(second > scale) <= 2 * 16 * 2


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = init_policy(Architecture(4, (5, 6)), 9)
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, p, {"seed": 9, "epoch": 3})
    q, meta = load_checkpoint(path)
    assert q.arch == p.arch
    np.testing.assert_array_equal(q.flat(), p.flat())
    assert meta == {"seed": 9, "epoch": 3}
    save_checkpoint(tmp_path / "q.ckpt", q, meta)
    assert path.read_bytes() == (tmp_path / "q.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"hello")
    with pytest.raises(UsageError):
        load_checkpoint(path)
