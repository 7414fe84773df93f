import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from depprune import kernels

BACKENDS = ["numpy"] + (["numba"] if "numba" in kernels._BACKENDS else [])
finite = st.floats(-8, 8, allow_nan=False, width=64)


def pair():
    return kernels.get_backend("numpy"), kernels.get_backend(BACKENDS[-1])


@pytest.mark.parametrize("name", BACKENDS)
def test_rmsnorm_matches_direct_formula(name):
    k = kernels.get_backend(name)
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(5, 7)), rng.normal(size=7)
    y, inv = k.rmsnorm_fwd(x, w, 1e-6)
    want = x / np.sqrt((x ** 2).mean(axis=1, keepdims=True) + 1e-6) * w
    np.testing.assert_allclose(y, want, rtol=1e-12)
    np.testing.assert_allclose(inv, 1 / np.sqrt((x ** 2).mean(axis=1) + 1e-6), rtol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_softmax_rows_sum_to_one_and_respect_mask(name):
    k = kernels.get_backend(name)
    x = np.random.default_rng(1).normal(size=(2, 4, 4)) * 10
    allowed = np.ascontiguousarray(np.broadcast_to(np.tril(np.ones((4, 4), bool)), x.shape))
    p = k.softmax_fwd(x, allowed)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-13)
    assert (p[~allowed] == 0).all()
    q = k.softmax_fwd(x, None)
    e = np.exp(x - x.max(-1, keepdims=True))
    np.testing.assert_allclose(q, e / e.sum(-1, keepdims=True), rtol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_swiglu_is_stable_for_large_inputs(name):
    k = kernels.get_backend(name)
    g = np.array([[-800.0, -30.0, 0.0, 30.0, 800.0]])
    y, s = k.swiglu_fwd(g, np.ones_like(g))
    assert np.isfinite(y).all() and np.isfinite(s).all()
    np.testing.assert_allclose(y[0, 3:], [30.0, 800.0], rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite), arrays(np.float64, (3, 6), elements=finite),
       arrays(np.float64, (6,), elements=finite))
def test_backends_agree(x, gy, w):
    a, b = pair()
    ya, ia = a.rmsnorm_fwd(x, w, 1e-5)
    yb, ib = b.rmsnorm_fwd(x, w, 1e-5)
    np.testing.assert_allclose(ya, yb, rtol=1e-10, atol=1e-10)
    for ra, rb in zip(a.rmsnorm_bwd(gy, x, w, ia), b.rmsnorm_bwd(gy, x, w, ib)):
        np.testing.assert_allclose(ra, rb, rtol=1e-9, atol=1e-9)
    x3 = x.reshape(1, 3, 6)
    pa, pb = a.softmax_fwd(x3, None), b.softmax_fwd(x3, None)
    np.testing.assert_allclose(pa, pb, rtol=1e-12, atol=1e-15)
    g3 = gy.reshape(1, 3, 6)
    np.testing.assert_allclose(a.softmax_bwd(g3, pa), b.softmax_bwd(g3, pb), rtol=1e-10, atol=1e-12)
    sa, sb = a.swiglu_fwd(x, gy), b.swiglu_fwd(x, gy)
    np.testing.assert_allclose(sa[0], sb[0], rtol=1e-12, atol=1e-13)
    for ra, rb in zip(a.swiglu_bwd(gy, x, gy, sa[1]), b.swiglu_bwd(gy, x, gy, sb[1])):
        np.testing.assert_allclose(ra, rb, rtol=1e-11, atol=1e-12)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.get_backend("cuda")
