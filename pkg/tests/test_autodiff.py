import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copylab.attention import rope_tables
from copylab.autodiff import Tape, Tensor, leaves
from copylab.models import ModelSpec, init_params
from copylab.numerics import make_rng
from copylab.training import masked_next_token_loss

from gradcheck import TOY_SPECS, toy_batch, worst_relative_error


@pytest.mark.parametrize("spec", TOY_SPECS, ids=lambda s: f"{s.arch}-{s.scheme}")
def test_model_gradients_finite_difference(spec):
    worst = worst_relative_error(spec, projections=3)
    assert max(worst.values()) < 1e-4, worst


def _fd_op(build, shapes, seed=0, h=1e-6):
    """Gradient of ``sum(w * build(tape, *xs))`` against central differences."""
    rng = make_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    tape = Tape()
    ts = [Tensor(x, requires_grad=True) for x in xs]
    out = build(tape, *ts)
    wts = rng.normal(size=out.shape)
    loss = tape.mul(out, Tensor(wts))
    loss = tape.reshape(loss, (-1,))
    total = tape.matmul(tape.reshape(loss, (1, -1)), Tensor(np.ones((loss.shape[0], 1))))
    total = tape.reshape(total, ())
    g = tape.backward(total)
    for i, x in enumerate(xs):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp = [a.copy() for a in xs]
            xm = [a.copy() for a in xs]
            xp[i][idx] += h
            xm[i][idx] -= h
            fp = (build(Tape(False), *map(Tensor, xp)).data * wts).sum()
            fm = (build(Tape(False), *map(Tensor, xm)).data * wts).sum()
            num[idx] = (fp - fm) / (2 * h)
        assert np.allclose(g[id(ts[i])], num, rtol=1e-5, atol=1e-7), i


def test_op_gradients():
    _fd_op(lambda t, a, b: t.add(a, b), [(3, 4), (4,)])
    _fd_op(lambda t, a, b: t.sub(a, b), [(3, 4), (1, 4)])
    _fd_op(lambda t, a, b: t.mul(a, b), [(2, 3), (2, 3)])
    _fd_op(lambda t, a: t.scale(a, 2.5), [(3,)])
    _fd_op(lambda t, a: t.sigmoid(a), [(5,)])
    _fd_op(lambda t, a: t.tanh(a), [(5,)])
    _fd_op(lambda t, a, b: t.matmul(a, b), [(2, 3, 4), (4, 5)])
    _fd_op(lambda t, a, b: t.matmul(a, b), [(2, 3, 4), (2, 4, 2)])
    _fd_op(lambda t, a: t.transpose(a, (1, 0, 2)), [(2, 3, 4)])
    _fd_op(lambda t, a: t.slice_last(a, 1, 3), [(2, 4)])
    _fd_op(lambda t, a: t.take(a, 1, axis=1), [(2, 3, 2)])
    _fd_op(lambda t, a, b: t.concat([a, b], axis=-1), [(2, 3), (2, 2)])
    _fd_op(lambda t, a, b: t.stack([a, b], axis=1), [(2, 3), (2, 3)])
    _fd_op(lambda t, a: t.softmax(a, axis=-1), [(3, 4)])
    _fd_op(lambda t, a, g, b: t.layernorm(a, g, b), [(3, 5), (5,), (5,)])
    cos, sin = rope_tables(3, 4)
    _fd_op(lambda t, a: t.rope(a, cos, sin), [(2, 3, 4)])


def test_relu_gradient_away_from_kink():
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    tape = Tape()
    t = Tensor(x, requires_grad=True)
    y = tape.relu(t)
    tot = tape.reshape(tape.matmul(tape.reshape(y, (1, 4)), Tensor(np.ones((4, 1)))), ())
    assert tape.backward(tot)[id(t)].tolist() == [0.0, 0.0, 1.0, 1.0]


def test_diag_scan_gradient():
    def build(t, a, b):
        return t.diag_scan(t.sigmoid(a), b)

    _fd_op(build, [(2, 5, 3), (2, 5, 3)])


def test_embedding_gradient_accumulates_repeats():
    tape = Tape()
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    e = tape.embedding(table, np.array([[0, 2, 0]]))
    tot = tape.reshape(tape.matmul(tape.reshape(e, (1, 6)), Tensor(np.ones((6, 1)))), ())
    assert tape.backward(tot)[id(table)].tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]
    with pytest.raises(ValueError):
        tape.embedding(table, np.array([3]))


def test_cross_entropy_uniform_and_confident():
    V = 13
    tape = Tape()
    z = Tensor(np.zeros((2, 4, V)))
    t = np.zeros((2, 4), dtype=int)
    assert abs(float(tape.masked_cross_entropy(z, t, np.ones((2, 4), bool)).data) - math.log(V)) < 1e-12
    big = np.full((1, 2, V), -1e3)
    big[0, :, 3] = 1e3
    assert float(tape.masked_cross_entropy(Tensor(big), np.full((1, 2), 3), np.ones((1, 2), bool)).data) < 1e-12
    with pytest.raises(ValueError):
        tape.masked_cross_entropy(z, t, np.zeros((2, 4), bool))


def test_unmasked_logits_get_zero_gradient():
    rng = make_rng(0)
    tape = Tape()
    z = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
    mask = rng.random((2, 5)) < 0.5
    mask[0, 0] = True
    loss = tape.masked_cross_entropy(z, rng.integers(0, 6, (2, 5)), mask)
    g = tape.backward(loss)[id(z)]
    assert np.all(g[~mask] == 0.0)


def test_softmax_regression_closed_form():
    rng = make_rng(1)
    X = rng.normal(size=(7, 4))
    W = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, 7)
    tape = Tape()
    Wt = Tensor(W, requires_grad=True)
    loss = tape.masked_cross_entropy(tape.matmul(Tensor(X), Wt), y, np.ones(7, bool))
    z = X @ W
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(7), y] -= 1
    assert np.allclose(tape.backward(loss)[id(Wt)], X.T @ p / 7, atol=1e-14)


@given(st.integers(0, 2**31))
def test_loss_ignores_targets_outside_mask(seed):
    rng = make_rng(seed)
    spec = ModelSpec("transformer", 7, d=8, layers=1, heads=2)
    P = init_params(spec, make_rng(0))
    toks, mask = toy_batch()
    base = float(masked_next_token_loss(spec, P, toks, mask)[0].data)
    z = Tensor(rng.normal(size=(2, 11, 7)))
    tgt = toks[:, 1:]
    m = mask[:, 1:]
    tgt2 = np.where(m, tgt, rng.integers(0, 7, tgt.shape))
    tape = Tape(False)
    assert float(tape.masked_cross_entropy(z, tgt, m).data) == float(tape.masked_cross_entropy(z, tgt2, m).data)
    assert base == float(masked_next_token_loss(spec, P, toks, mask)[0].data)


@pytest.mark.parametrize("spec", TOY_SPECS[:1] + TOY_SPECS[-2:], ids=lambda s: s.arch)
def test_replay_bitwise(spec):
    toks, mask = toy_batch()
    _, tape, _ = masked_next_token_loss(spec, init_params(spec, make_rng(2)), toks, mask)
    assert tape.nodes and tape.replay()


def test_backward_needs_scalar():
    tape = Tape()
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        tape.backward(tape.scale(a, 2.0))


def test_leaves_require_grad():
    L = leaves({"a": np.ones(2)})
    assert L["a"].requires_grad and L["a"].name == "a"
