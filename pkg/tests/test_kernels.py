"""Each kernel's numba and numpy paths must agree."""

import contextlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copylab import construction, gssm, kernels, tasks
from copylab.numerics import make_rng

from oracles import has_equal_windows

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba missing")


@contextlib.contextmanager
def backend(name):
    prev = kernels.set_backend(name)
    try:
        yield
    finally:
        kernels.set_backend(prev)


def both(fn):
    with backend("numba"):
        a = fn()
    with backend("numpy"):
        b = fn()
    return a, b


def test_set_backend_validates():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


@given(st.integers(1, 5), st.integers(0, 30), st.integers(1, 6), st.integers(0, 2**31))
def test_repeated_windows_parity_and_oracle(D, L, w, seed):
    X = make_rng(seed).integers(0, D, size=(6, L))
    a, b = both(lambda: kernels.repeated_windows(X, w, D))
    assert np.array_equal(a, b)
    assert a.tolist() == [has_equal_windows(x, w) for x in X]


@given(st.integers(1, 5), st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**31))
def test_hash_copy_parity(D, L, w, seed):
    X = make_rng(seed).integers(0, D, size=(5, L))
    (ya, ma), (yb, mb) = both(lambda: kernels.hash_copy(X, w, D))
    assert np.array_equal(ya, yb) and np.array_equal(ma, mb)


@pytest.mark.parametrize("D,L,w", [(2, 8, 2), (3, 6, 2), (4, 5, 3), (2, 10, 4)])
def test_count_repeats_parity(D, L, w):
    a, b = both(lambda: kernels.count_repeats_all(D, L, w))
    assert a == b


def test_gssm_correct_parity():
    rng = make_rng(1)
    for S in (2, 5, 16):
        spec = gssm.random_spec(S, 5, 2, rng)
        a, b = both(lambda: kernels.gssm_copy_correct(spec.update, spec.readout, 0, 2, 5, 2, 3))
        assert a == b


def test_diag_scan_parity():
    rng = make_rng(2)
    a_ = rng.uniform(0, 1, size=(3, 7, 4))
    b_ = rng.normal(size=(3, 7, 4))
    g = rng.normal(size=(3, 7, 4))
    h1, h2 = both(lambda: kernels.diag_scan(a_, b_))
    assert np.allclose(h1, h2, rtol=0, atol=1e-14)
    (ga1, gb1), (ga2, gb2) = both(lambda: kernels.diag_scan_grad(g, a_, h1))
    assert np.allclose(ga1, ga2, atol=1e-13) and np.allclose(gb1, gb2, atol=1e-13)


def test_softmax_read_parity():
    rng = make_rng(3)
    keys_t = rng.normal(size=(2, 5, 9))
    values = rng.normal(size=(2, 9, 3))
    q = rng.normal(size=(2, 5))
    a, b = both(lambda: kernels.softmax_read(keys_t, values, q, 7, 3.0))
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_generation_parity_on_unique_strings():
    # unique windows leave no exact ties, so both paths decode identically
    c = construction.build_copier(26, 5, 200)
    X = tasks.sample_unique_ngram_strings(tasks.Vocab(26), 150, 5, 8, make_rng(4))
    a, b = both(lambda: construction.generate_copy_batch(c, X))
    assert np.array_equal(a, b) and np.array_equal(a, X)


def test_generation_parity_uniform_small_n():
    c = construction.build_copier(26, 3, 100)
    X = tasks.uniform_strings(tasks.Vocab(26), 80, 16, make_rng(5))
    dup = kernels.repeated_windows(X, 4, 26)
    a, b = both(lambda: construction.generate_copy_batch(c, X))
    assert np.array_equal(a[~dup], b[~dup])


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, expected):
    import os
    import subprocess
    import sys

    env = {**os.environ, "COPYLAB_DISABLE_NUMBA": flag}
    out = subprocess.run(
        [sys.executable, "-c", "from copylab import kernels; print(kernels.backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
