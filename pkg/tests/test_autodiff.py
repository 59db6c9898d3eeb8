import numpy as np
import pytest

from dsdgp import autodiff as ad
from dsdgp.autodiff import Var, gradient_of
from dsdgp.errors import UnregisteredParameter
from helpers import assert_grads_close, finite_difference


def test_sum_of_squares():
    v = np.array([1.0, -2.0, 3.0])
    tape = gradient_of(lambda p: (p["v"] ** 2).sum(), {"v": v})
    np.testing.assert_array_equal(tape["v"], 2 * v)
    assert tape.value == 14.0


def test_constant_objective_gives_zero_tape():
    tape = gradient_of(lambda p: 3.0, {"a": np.ones(2), "b": np.ones((2, 2))})
    assert tape.value == 3.0
    assert all(np.all(g == 0) for g in tape.grads.values())
    assert set(tape.names()) == {"a", "b"}


def test_unregistered_lookup():
    tape = gradient_of(lambda p: p["a"].sum(), {"a": np.ones(2)})
    with pytest.raises(UnregisteredParameter):
        tape["nope"]


def test_non_scalar_objective_rejected():
    with pytest.raises(ValueError):
        gradient_of(lambda p: p["a"] * 2.0, {"a": np.ones(2)})


def test_plain_arrays_pass_through():
    out = ad.matmul(np.eye(2), np.ones((2, 1)))
    assert isinstance(out, np.ndarray)
    assert isinstance(ad.exp(Var(np.zeros(2))), Var)


def test_reused_node_accumulates():
    tape = gradient_of(lambda p: (p["x"] * p["x"] * p["x"]).sum(), {"x": np.array([2.0])})
    assert tape["x"][0] == pytest.approx(12.0)


def test_mixed_ops_match_finite_differences():
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)), "c": rng.uniform(0.5, 1.5, size=(1, 2))}
    idx = np.array([0, 2, 2])

    def f(p):
        m = p["a"] @ p["b"]
        s = ad.sqrt(ad.square(m) + p["c"]) / p["c"] - ad.log(p["c"]) * 0.5
        t = ad.maximum(m, -0.3) + ad.exp(-m)
        cat = ad.concatenate([s, t], axis=1)
        g = cat[idx] * 1.5 + ad.log_ndtr(m).sum(axis=1, keepdims=True)
        sw = ad.swapaxes(g.reshape(3, 2, 2), 1, 2)
        return ad.sum_(ad.diagonal(sw)) - (1.0 - p["a"]).sum() + ad.power(p["c"], 3).sum()

    assert_grads_close(gradient_of(f, params), finite_difference(f, params))


def test_tril_factor_layouts_agree():
    rng = np.random.default_rng(1)
    n = 4
    packed = rng.normal(size=(2, n * (n + 1) // 2))
    full = ad.tril_factor(packed, n)
    stacked = ad.tril_factor(packed, n, stacked_transpose=True)
    np.testing.assert_array_equal(stacked, np.swapaxes(full, 1, 2).reshape(2 * n, n))
    assert np.all(np.diagonal(full, axis1=1, axis2=2) > 0)
    assert np.all(np.triu(full, 1) == 0)

    w = rng.normal(size=(2 * n, n))
    f = lambda p: (ad.tril_factor(p["q"], n, stacked_transpose=True) * w).sum()
    assert_grads_close(gradient_of(f, {"q": packed}), finite_difference(f, {"q": packed}))
