import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copylab.attention import (
    Alibi,
    BlockParams,
    HardAlibi,
    HeadParams,
    NoPE,
    Rope,
    alibi_slopes,
    avg_head,
    avg_heads,
    averaging_head,
    bias_matrix,
    bias_row,
    block_forward,
    head_forward,
    head_forward_all,
)
from copylab.numerics import NEG_INF, make_rng


def test_bias_rows():
    assert bias_row(HardAlibi(1), 3).tolist() == [NEG_INF, NEG_INF, 0.0]
    assert bias_row(HardAlibi(math.inf), 3).tolist() == [0.0, 0.0, 0.0] == bias_row(NoPE(), 3).tolist()
    assert bias_row(Alibi(1.0), 3).tolist() == [-2.0, -1.0, 0.0]


def test_bias_matrix_rows_match_bias_row():
    for s in (HardAlibi(2), HardAlibi(math.inf), Alibi(0.5), NoPE()):
        M = bias_matrix(s, 6)
        for i in range(1, 7):
            assert np.array_equal(M[i - 1, :i], bias_row(s, i))
            assert np.all(M[i - 1, i:] == NEG_INF)


def test_alibi_slopes():
    assert alibi_slopes(4) == [2**-0.5, 0.5, 2**-1.5, 0.25]


def test_invalid_schemes():
    with pytest.raises(ValueError):
        HardAlibi(0)
    with pytest.raises(ValueError):
        Alibi(0.0)


def _zero_head(d, bias):
    return HeadParams(np.zeros((d, d)), np.zeros((d, d)), np.eye(d), bias)


def test_head_examples():
    xs = make_rng(0).normal(size=(5, 3))
    assert np.allclose(head_forward(_zero_head(3, NoPE()), xs[:2]), (xs[0] + xs[1]) / 2, atol=1e-15)
    assert np.array_equal(head_forward(_zero_head(3, HardAlibi(1)), xs), xs[-1])
    for t in range(1, 7):
        for i in range(1, 6):
            h = head_forward(_zero_head(3, HardAlibi(t)), xs[:i])
            assert np.allclose(h, xs[max(0, i - t) : i].mean(axis=0), atol=1e-12)


def test_avg_head_examples():
    xs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert avg_head(2, xs).tolist() == [0.5, 1.0]
    assert avg_head(2, xs[:1]).tolist() == [1.0, 0.0]


@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**31))
def test_avg_head_matches_attention_head(t, T, seed):
    xs = make_rng(seed).normal(size=(T, 4))
    all_h = avg_heads(xs, t)
    via_head = head_forward_all(averaging_head(4, t), xs)
    assert np.max(np.abs(all_h - via_head)) <= 1e-12
    for i in range(1, T + 1):
        assert np.array_equal(avg_head(t, xs[:i]), all_h[i - 1])


@given(st.integers(1, 10), st.integers(0, 2**31))
def test_hard_alibi_inf_is_nope(T, seed):
    rng = make_rng(seed)
    W = [rng.normal(size=(4, 4)) for _ in range(3)]
    xs = rng.normal(size=(T, 4))
    a = head_forward_all(HeadParams(*W, HardAlibi(math.inf)), xs)
    b = head_forward_all(HeadParams(*W, NoPE()), xs)
    assert np.max(np.abs(a - b)) <= 1e-12


@pytest.mark.parametrize("scheme", [HardAlibi(2), Alibi(0.5), NoPE(), Rope()])
def test_causality_and_last_position(scheme):
    rng = make_rng(1)
    W = [rng.normal(size=(4, 4)) for _ in range(3)]
    hp = HeadParams(*W, scheme)
    xs = rng.normal(size=(8, 4))
    out = head_forward_all(hp, xs)
    ys = xs.copy()
    ys[5:] = rng.normal(size=(3, 4))
    assert np.allclose(head_forward_all(hp, ys)[:5], out[:5], atol=1e-14)
    for i in range(1, 9):
        assert np.allclose(head_forward(hp, xs[:i]), out[i - 1], atol=1e-12)


def test_block_forward():
    rng = make_rng(2)
    heads = [HeadParams(*[rng.normal(size=(3, 3)) for _ in range(3)], NoPE()) for _ in range(2)]
    xs = rng.normal(size=(5, 3))
    zero = BlockParams(heads, np.zeros((6, 4)), np.zeros((4, 6)))
    assert not block_forward(zero, xs).any()
    U1, U2 = rng.normal(size=(6, 4)), rng.normal(size=(4, 6))
    out = block_forward(BlockParams(heads, U1, U2), xs)
    z = np.concatenate([head_forward_all(h, xs) for h in heads], axis=1)
    assert np.allclose(out, np.maximum(z @ U2.T, 0) @ U1.T)
    # one head: head output then MLP
    one = BlockParams(heads[:1], U1[:3], U2[:, :3])
    assert np.allclose(block_forward(one, xs), np.maximum(head_forward_all(heads[0], xs) @ U2[:, :3].T, 0) @ U1[:3].T)
    # swapping heads swaps blocks of the concatenation
    perm = np.r_[3:6, 0:3]
    swapped = block_forward(BlockParams(heads[::-1], U1[perm], U2[:, perm]), xs)
    assert np.allclose(swapped, out[:, perm], atol=1e-12)
    with pytest.raises(ValueError):
        BlockParams(heads, np.zeros((5, 4)), np.zeros((4, 6)))
