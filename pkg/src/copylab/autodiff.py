"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Each op computes its output eagerly and, when the tape is recording, appends a
node holding the forward recomputation and the vector-Jacobian product.
``Tape.backward`` walks the nodes in reverse exactly once; ``Tape.replay``
recomputes every node from its stored inputs and checks the outputs match bit
for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor({self.name or '?'}, shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Tensor
    forward: Callable
    vjp: Callable  # g -> tuple of input grads (None where not needed)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    # -- plumbing -----------------------------------------------------------

    def _emit(self, op, inputs, fwd, vjp_factory):
        datas = [t.data for t in inputs]
        out = Tensor(fwd(*datas))
        out.requires_grad = self.record and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            self.nodes.append(Node(op, tuple(inputs), out, fwd, vjp_factory(out.data, *datas)))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss``, keyed by ``id`` of each leaf that requires grad."""
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                grads[k] = grads[k] + gi if k in grads else gi
        return grads

    def grads_for(self, loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        g = self.backward(loss)
        return {k: g.get(id(t), np.zeros_like(t.data)) for k, t in params.items()}

    def replay(self) -> bool:
        return all(np.array_equal(n.forward(*[t.data for t in n.inputs]), n.out.data) for n in self.nodes)

    # -- elementwise --------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        return self._emit("add", (a, b), np.add, lambda o, x, y: lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        return self._emit(
            "sub", (a, b), np.subtract, lambda o, x, y: lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
        )

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        return self._emit(
            "mul",
            (a, b),
            np.multiply,
            lambda o, x, y: lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
        )

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._emit("scale", (a,), lambda x: x * c, lambda o, x: lambda g: (g * c,))

    def relu(self, a: Tensor) -> Tensor:
        return self._emit("relu", (a,), lambda x: np.maximum(x, 0.0), lambda o, x: lambda g: (g * (x > 0),))

    def sigmoid(self, a: Tensor) -> Tensor:
        return self._emit("sigmoid", (a,), _sigmoid, lambda o, x: lambda g: (g * o * (1.0 - o),))

    def tanh(self, a: Tensor) -> Tensor:
        return self._emit("tanh", (a,), np.tanh, lambda o, x: lambda g: (g * (1.0 - o * o),))

    # -- linear algebra and shape -------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Batched ``a @ b``; ``b`` may be a shared 2-D weight."""
        sa, sb = a.shape, b.shape

        def vjp(o, x, y):
            def f(g):
                ga = g @ np.swapaxes(y, -1, -2)
                if len(sb) == 2:
                    gb = x.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, sb)
                return _unbroadcast(ga, sa), gb

            return f

        return self._emit("matmul", (a, b), np.matmul, vjp)

    def reshape(self, a: Tensor, shape) -> Tensor:
        s = a.shape
        return self._emit("reshape", (a,), lambda x: x.reshape(shape), lambda o, x: lambda g: (g.reshape(s),))

    def transpose(self, a: Tensor, axes) -> Tensor:
        inv = np.argsort(axes)
        return self._emit(
            "transpose", (a,), lambda x: np.transpose(x, axes), lambda o, x: lambda g: (np.transpose(g, inv),)
        )

    def slice_last(self, a: Tensor, start: int, stop: int) -> Tensor:
        s = a.shape

        def vjp(o, x):
            def f(g):
                out = np.zeros(s)
                out[..., start:stop] = g
                return (out,)

            return f

        return self._emit("slice", (a,), lambda x: x[..., start:stop], vjp)

    def take(self, a: Tensor, index, axis: int) -> Tensor:
        """``a`` at a single integer ``index`` along ``axis`` (axis removed)."""
        s = a.shape

        def vjp(o, x):
            def f(g):
                out = np.zeros(s)
                sl = [slice(None)] * len(s)
                sl[axis] = index
                out[tuple(sl)] = g
                return (out,)

            return f

        return self._emit("take", (a,), lambda x: np.take(x, index, axis=axis), vjp)

    def concat(self, ts: Sequence[Tensor], axis: int = -1) -> Tensor:
        sizes = [t.shape[axis] for t in ts]
        cuts = np.cumsum(sizes)[:-1]
        return self._emit(
            "concat",
            tuple(ts),
            lambda *xs: np.concatenate(xs, axis=axis),
            lambda o, *xs: lambda g: tuple(np.split(g, cuts, axis=axis)),
        )

    def stack(self, ts: Sequence[Tensor], axis: int = 0) -> Tensor:
        n = len(ts)
        return self._emit(
            "stack",
            tuple(ts),
            lambda *xs: np.stack(xs, axis=axis),
            lambda o, *xs: lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        )

    # -- model pieces -------------------------------------------------------

    def softmax(self, a: Tensor, axis: int = -1) -> Tensor:
        def vjp(o, x):
            return lambda g: (o * (g - (g * o).sum(axis=axis, keepdims=True)),)

        return self._emit("softmax", (a,), lambda x: _softmax(x, axis), vjp)

    def layernorm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
        def fwd(x, g, b):
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=-1, keepdims=True)
            return xc / np.sqrt(var + eps) * g + b

        def vjp(o, x, gm, b):
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + eps)
            xh = xc * inv

            def f(g):
                gx_h = g * gm
                gx = inv * (gx_h - gx_h.mean(axis=-1, keepdims=True) - xh * (gx_h * xh).mean(axis=-1, keepdims=True))
                red = tuple(range(g.ndim - 1))
                return gx, (g * xh).sum(axis=red), g.sum(axis=red)

            return f

        return self._emit("layernorm", (x, gamma, beta), fwd, vjp)

    def embedding(self, table: Tensor, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        V = table.shape[0]

        def vjp(o, t):
            def f(g):
                out = np.zeros_like(t)
                np.add.at(out, ids.reshape(-1), g.reshape(-1, t.shape[1]))
                return (out,)

            return f

        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise ValueError("token id outside the embedding table")
        return self._emit("embedding", (table,), lambda t: t[ids], vjp)

    def rope(self, x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
        """Half-split rotary rotation over the last axis; ``cos``/``sin`` are ``(T, dim/2)``."""
        h = x.shape[-1] // 2

        def rot(v, s):
            v1, v2 = v[..., :h], v[..., h:]
            return np.concatenate([v1 * cos - v2 * s, v2 * cos + v1 * s], axis=-1)

        return self._emit("rope", (x,), lambda v: rot(v, sin), lambda o, v: lambda g: (rot(g, -sin),))

    def diag_scan(self, a: Tensor, b: Tensor) -> Tensor:
        """``h_t = a_t * h_{t-1} + b_t`` along axis 1 of ``(B, T, N)`` inputs, ``h_{-1} = 0``."""

        def vjp(o, x, y):
            return lambda g: kernels.diag_scan_grad(g, x, o)

        return self._emit("diag_scan", (a, b), kernels.diag_scan, vjp)

    def masked_cross_entropy(self, logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
        """Mean cross-entropy over positions where ``mask`` is set."""
        targets = np.asarray(targets, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        count = int(mask.sum())
        if count == 0:
            raise ValueError("loss mask selects no positions")
        V = logits.shape[-1]

        def fwd(z):
            m = z.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(z - m).sum(axis=-1)) + m[..., 0]
            picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
            return np.array(((lse - picked) * mask).sum() / count)

        def vjp(o, z):
            def f(g):
                p = _softmax(z, -1)
                p[..., :] -= np.eye(V)[targets]
                return (p * (mask[..., None] * (float(g) / count)),)

            return f

        return self._emit("xent", (logits,), fwd, vjp)


def leaves(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
