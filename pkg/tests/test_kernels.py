"""The compiled and pure-Python kernel backends must agree bit for bit."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepid3 import kernels
from deepid3.kernels import python_backend as py

compiled = kernels.compiled_backend
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def naive_im2col(x, kh, kw, stride, pad):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((c * kh * kw, oh * ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
            cols[:, i * ow + j] = patch.reshape(-1)
    return cols


geometry = st.tuples(
    st.integers(1, 3),  # channels
    st.integers(3, 7),  # height
    st.integers(3, 7),  # width
    st.integers(1, 3),  # kernel
    st.integers(1, 2),  # stride
    st.integers(0, 1),  # pad
    st.integers(0, 2**31 - 1),
)


@settings(max_examples=60, deadline=None)
@given(geometry)
def test_python_im2col_matches_naive(g):
    c, h, w, k, s, p, seed = g
    x = np.random.default_rng(seed).normal(size=(c, h, w))
    np.testing.assert_array_equal(py.im2col(x, k, k, s, p), naive_im2col(x, k, k, s, p))


@settings(max_examples=60, deadline=None)
@given(geometry)
def test_col2im_is_adjoint_of_im2col(g):
    c, h, w, k, s, p, seed = g
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    cols = py.im2col(x, k, k, s, p)
    y = rng.normal(size=cols.shape)
    # <im2col(x), y> == <x, col2im(y)>
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x * py.col2im(y, c, h, w, k, k, s, p)))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@needs_compiled
@settings(max_examples=60, deadline=None)
@given(geometry)
def test_backends_agree_on_im2col_col2im(g):
    c, h, w, k, s, p, seed = g
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    np.testing.assert_array_equal(compiled.im2col(x, k, k, s, p), py.im2col(x, k, k, s, p))
    cols = rng.normal(size=(c * k * k, ((h + 2 * p - k) // s + 1) * ((w + 2 * p - k) // s + 1)))
    np.testing.assert_array_equal(compiled.col2im(cols, c, h, w, k, k, s, p),
                                  py.col2im(cols, c, h, w, k, k, s, p))


pool_geometry = st.tuples(st.integers(1, 3), st.integers(3, 7), st.sampled_from([(2, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0)]),
                          st.booleans(), st.integers(0, 2**31 - 1))


@needs_compiled
@settings(max_examples=60, deadline=None)
@given(pool_geometry)
def test_backends_agree_on_maxpool(g):
    c, n, (win, s, p), quantize, seed = g
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, n, n))
    if quantize:
        x = np.round(x)  # plenty of ties
    out_c, idx_c = compiled.maxpool_forward(x, win, s, p)
    out_p, idx_p = py.maxpool_forward(x, win, s, p)
    np.testing.assert_array_equal(out_c, out_p)
    np.testing.assert_array_equal(idx_c, idx_p)
    go = rng.normal(size=out_c.shape)
    np.testing.assert_array_equal(compiled.maxpool_backward(go, idx_c, n, n), py.maxpool_backward(go, idx_p, n, n))


def test_backend_selection_flag():
    assert kernels.BACKEND in ("cython", "python")
    assert (kernels.BACKEND == "cython") == (compiled is not None)


def test_pure_python_env_forces_fallback(tmp_path):
    import os
    import subprocess
    import sys

    env = dict(os.environ, DEEPID3_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from deepid3 import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
