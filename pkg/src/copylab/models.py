"""Tiny trainable sequence models built on the autodiff tape.

Parameters live in a flat ``dict[str, np.ndarray]``; ``forward`` takes the
matching leaf tensors and a ``(B, T)`` token array and returns ``(B, T, V)``
logits. Generation is greedy and recomputes the full prefix at every step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .attention import Alibi, HardAlibi, NoPE, Rope, alibi_slopes, bias_matrix, rope_tables
from .autodiff import Tape, Tensor, leaves

SCHEMES = ("hard_alibi", "alibi", "nope", "rope")


@dataclass(frozen=True)
class ModelSpec:
    arch: str  # transformer | lstm | ssm
    vocab_size: int
    d: int = 64
    layers: int = 2
    heads: int = 4
    scheme: str = "hard_alibi"
    masked_heads: int | None = None  # Hard-ALiBi: heads with a finite window
    masked_qk: bool = True  # False: windowed heads ignore W_q/W_k and average their window
    state: int | None = None  # ssm state size, defaults to d
    mlp_mult: int = 4

    def __post_init__(self):
        if self.arch not in ("transformer", "lstm", "ssm"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.arch == "transformer":
            if self.scheme not in SCHEMES:
                raise ValueError(f"unknown positional scheme {self.scheme!r}")
            if self.d % self.heads:
                raise ValueError("d must be divisible by heads")
            if self.scheme == "rope" and (self.d // self.heads) % 2:
                raise ValueError("rotary needs an even head dimension")
        if self.vocab_size < 1 or self.d < 1 or self.layers < 1:
            raise ValueError("sizes must be positive")

    @property
    def n_masked(self) -> int:
        return self.heads // 2 if self.masked_heads is None else self.masked_heads

    def to_dict(self) -> dict:
        return asdict(self)


def head_schemes(spec: ModelSpec) -> list:
    """Per-head bias scheme; Hard-ALiBi heads ``h < M`` see the last ``h + 1`` positions."""
    H = spec.heads
    if spec.scheme == "hard_alibi":
        M = spec.n_masked
        if not 0 <= M <= H:
            raise ValueError("masked head count must lie in 0..heads")
        return [HardAlibi(h + 1) if h < M else HardAlibi(math.inf) for h in range(H)]
    if spec.scheme == "alibi":
        return [Alibi(s) for s in alibi_slopes(H)]
    if spec.scheme == "rope":
        return [Rope() for _ in range(H)]
    return [NoPE() for _ in range(H)]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    V, d = spec.vocab_size, spec.d
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out, std=None):
        p[name] = rng.normal(0.0, std if std is not None else 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    p["embed"] = rng.normal(0.0, 1.0, size=(V, d))
    if spec.arch == "transformer":
        for i in range(spec.layers):
            for ln in ("ln1", "ln2"):
                p[f"l{i}.{ln}.g"] = np.ones(d)
                p[f"l{i}.{ln}.b"] = np.zeros(d)
            for w in ("q", "k", "v", "o"):
                lin(f"l{i}.W{w}", d, d)
            lin(f"l{i}.W1", d, spec.mlp_mult * d)
            p[f"l{i}.b1"] = np.zeros(spec.mlp_mult * d)
            lin(f"l{i}.W2", spec.mlp_mult * d, d)
            p[f"l{i}.b2"] = np.zeros(d)
        p["lnf.g"] = np.ones(d)
        p["lnf.b"] = np.zeros(d)
    elif spec.arch == "lstm":
        for i in range(spec.layers):
            lin(f"l{i}.W", 2 * d, 4 * d)
            b = np.zeros(4 * d)
            b[d : 2 * d] = 1.0  # forget gate starts open
            p[f"l{i}.b"] = b
    else:
        N = spec.state or d
        for i in range(spec.layers):
            p[f"l{i}.ln.g"] = np.ones(d)
            p[f"l{i}.ln.b"] = np.zeros(d)
            for w in ("a", "i", "x", "g"):
                lin(f"l{i}.W{w}", d, N)
            # decay gates start near 0.9 so early gradients reach back in time
            p[f"l{i}.ba"] = np.full(N, 2.0)
            lin(f"l{i}.Wo", N, d)
    # small readout so the untrained loss sits near ln V
    lin("unembed", d, V, std=0.02)
    return p


def n_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def _attention(tape: Tape, spec: ModelSpec, P, i: int, x: Tensor, T: int) -> Tensor:
    B = x.shape[0]
    H = spec.heads
    dh = spec.d // H

    def split(t):
        return tape.transpose(tape.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = split(tape.matmul(x, P[f"l{i}.Wq"]))
    k = split(tape.matmul(x, P[f"l{i}.Wk"]))
    v = split(tape.matmul(x, P[f"l{i}.Wv"]))
    if spec.scheme == "rope":
        cos, sin = rope_tables(T, dh)
        q = tape.rope(q, cos, sin)
        k = tape.rope(k, cos, sin)
    scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if spec.scheme == "hard_alibi" and not spec.masked_qk:
        keep = (np.arange(H) >= spec.n_masked).astype(np.float64)
        scores = tape.mul(scores, Tensor(keep[None, :, None, None]))
    bias = np.stack([bias_matrix(s, T) for s in head_schemes(spec)])[None]
    att = tape.softmax(tape.add(scores, Tensor(bias)), axis=-1)
    o = tape.reshape(tape.transpose(tape.matmul(att, v), (0, 2, 1, 3)), (B, T, spec.d))
    return tape.matmul(o, P[f"l{i}.Wo"])


def _transformer(tape: Tape, spec: ModelSpec, P, tokens: np.ndarray) -> Tensor:
    T = tokens.shape[1]
    x = tape.embedding(P["embed"], tokens)
    for i in range(spec.layers):
        h = tape.layernorm(x, P[f"l{i}.ln1.g"], P[f"l{i}.ln1.b"])
        x = tape.add(x, _attention(tape, spec, P, i, h, T))
        h = tape.layernorm(x, P[f"l{i}.ln2.g"], P[f"l{i}.ln2.b"])
        h = tape.relu(tape.add(tape.matmul(h, P[f"l{i}.W1"]), P[f"l{i}.b1"]))
        x = tape.add(x, tape.add(tape.matmul(h, P[f"l{i}.W2"]), P[f"l{i}.b2"]))
    x = tape.layernorm(x, P["lnf.g"], P["lnf.b"])
    return tape.matmul(x, P["unembed"])


def _lstm(tape: Tape, spec: ModelSpec, P, tokens: np.ndarray) -> Tensor:
    B, T = tokens.shape
    d = spec.d
    x = tape.embedding(P["embed"], tokens)
    seq = [tape.take(x, t, axis=1) for t in range(T)]
    for i in range(spec.layers):
        h = Tensor(np.zeros((B, d)))
        c = Tensor(np.zeros((B, d)))
        out = []
        for t in range(T):
            z = tape.add(tape.matmul(tape.concat([seq[t], h], axis=-1), P[f"l{i}.W"]), P[f"l{i}.b"])
            ig = tape.sigmoid(tape.slice_last(z, 0, d))
            fg = tape.sigmoid(tape.slice_last(z, d, 2 * d))
            og = tape.sigmoid(tape.slice_last(z, 2 * d, 3 * d))
            gg = tape.tanh(tape.slice_last(z, 3 * d, 4 * d))
            c = tape.add(tape.mul(fg, c), tape.mul(ig, gg))
            h = tape.mul(og, tape.tanh(c))
            out.append(h)
        seq = out
    return tape.matmul(tape.stack(seq, axis=1), P["unembed"])


def _ssm(tape: Tape, spec: ModelSpec, P, tokens: np.ndarray) -> Tensor:
    x = tape.embedding(P["embed"], tokens)
    for i in range(spec.layers):
        u = tape.layernorm(x, P[f"l{i}.ln.g"], P[f"l{i}.ln.b"])
        a = tape.sigmoid(tape.add(tape.matmul(u, P[f"l{i}.Wa"]), P[f"l{i}.ba"]))
        gate_in = tape.sigmoid(tape.matmul(u, P[f"l{i}.Wi"]))
        h = tape.diag_scan(a, tape.mul(gate_in, tape.matmul(u, P[f"l{i}.Wx"])))
        y = tape.mul(h, tape.sigmoid(tape.matmul(u, P[f"l{i}.Wg"])))
        x = tape.add(x, tape.matmul(y, P[f"l{i}.Wo"]))
    return tape.matmul(x, P["unembed"])


def forward(tape: Tape, spec: ModelSpec, P: dict[str, Tensor], tokens) -> Tensor:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if spec.arch == "transformer":
        return _transformer(tape, spec, P, tokens)
    if spec.arch == "lstm":
        return _lstm(tape, spec, P, tokens)
    return _ssm(tape, spec, P, tokens)


def logits(spec: ModelSpec, params: dict[str, np.ndarray], tokens) -> np.ndarray:
    """Inference-only forward pass."""
    tape = Tape(record=False)
    P = {k: Tensor(v) for k, v in params.items()}
    return forward(tape, spec, P, tokens).data


@dataclass
class TrainedModel:
    """Greedy generator over a parameter set; satisfies the evaluation interface."""

    spec: ModelSpec
    params: dict
    name: str = "model"

    def generate(self, prompts, steps: int) -> np.ndarray:
        seq = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
        out = np.empty((len(seq), steps), dtype=np.int64)
        for j in range(steps):
            y = np.argmax(logits(self.spec, self.params, seq)[:, -1], axis=-1)
            out[:, j] = y
            seq = np.concatenate([seq, y[:, None]], axis=1)
        return out


__all__ = [
    "SCHEMES",
    "ModelSpec",
    "TrainedModel",
    "forward",
    "head_schemes",
    "init_params",
    "leaves",
    "logits",
    "n_params",
]
