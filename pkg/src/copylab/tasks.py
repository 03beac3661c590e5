"""Vocabularies and seeded generators for the synthetic copy and lookup tasks.

Token ids: ordinary symbols are ``0..D-1``; BOS, COPY and EOS follow as
``D``, ``D+1``, ``D+2``. Every generator is a pure function of its arguments
and the ``numpy.random.Generator`` passed in.

Window convention: an "n-gram" in the repeated-n-gram sense is a window of
``n + 1`` consecutive tokens ``x[i..i+n]``. Functions that take ``n`` for
that purpose say so; the lookup tasks take the key length in tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

MAX_RETRIES = 10_000


class RejectionError(RuntimeError):
    """Rejection sampling ran out of retries."""


@dataclass(frozen=True)
class Vocab:
    D: int

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("alphabet needs at least one ordinary token")

    @property
    def bos(self) -> int:
        return self.D

    @property
    def copy(self) -> int:
        return self.D + 1

    @property
    def eos(self) -> int:
        return self.D + 2

    @property
    def size(self) -> int:
        return self.D + 3

    def is_ordinary(self, tok: int) -> bool:
        return 0 <= tok < self.D


@dataclass
class Record:
    """One line of a serialized dataset."""

    tokens: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "tokens": " ".join(str(int(t)) for t in self.tokens),
                "mask": "".join("1" if m else "0" for m in self.mask),
                "meta": self.meta,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Record":
        obj = json.loads(line)
        toks = np.array([int(t) for t in obj["tokens"].split()], dtype=np.int64)
        mask = np.array([c == "1" for c in obj["mask"]], dtype=bool)
        if len(toks) != len(mask):
            raise ValueError("tokens and mask lengths differ")
        return cls(toks, mask, obj.get("meta", {}))


@dataclass
class CopyInstance:
    tokens: np.ndarray
    input_len: int
    loss_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def source(self) -> np.ndarray:
        return self.tokens[1 : 1 + self.input_len]

    @property
    def prompt(self) -> np.ndarray:
        """``BOS, x, COPY``."""
        return self.tokens[: self.input_len + 2]

    @property
    def target(self) -> np.ndarray:
        return self.tokens[self.input_len + 2 : 2 * self.input_len + 2]

    def to_record(self) -> Record:
        meta = {"variant": "copy", "L": self.input_len, **self.meta}
        return Record(self.tokens.copy(), self.loss_mask.copy(), meta)

    @classmethod
    def from_record(cls, rec: Record) -> "CopyInstance":
        meta = dict(rec.meta)
        L = int(meta.pop("L"))
        meta.pop("variant", None)
        return cls(rec.tokens.copy(), L, rec.mask.copy(), meta)


@dataclass
class LookupInstance:
    variant: str
    context: np.ndarray
    key: np.ndarray
    answer: np.ndarray
    key_pos: int
    tokens: np.ndarray
    loss_mask: np.ndarray
    prompt_len: int
    meta: dict = field(default_factory=dict)

    @property
    def prompt(self) -> np.ndarray:
        return self.tokens[: self.prompt_len]

    def to_record(self) -> Record:
        meta = {
            "variant": self.variant,
            "L": int(len(self.context)),
            "key_len": int(len(self.key)),
            "k": int(len(self.answer)),
            "key_pos": int(self.key_pos),
            "prompt_len": int(self.prompt_len),
            **self.meta,
        }
        return Record(self.tokens.copy(), self.loss_mask.copy(), meta)


def make_copy_instance(vocab: Vocab, x, meta: dict | None = None) -> CopyInstance:
    """``BOS, x, COPY, x, EOS`` with the loss on the second ``x`` and on EOS."""
    x = np.asarray(x, dtype=np.int64)
    L = len(x)
    tokens = np.concatenate([[vocab.bos], x, [vocab.copy], x, [vocab.eos]]).astype(np.int64)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[L + 2 :] = True
    return CopyInstance(tokens, L, mask, dict(meta or {}))


def sample_uniform_copy(vocab: Vocab, L: int, rng: np.random.Generator) -> CopyInstance:
    if L < 1:
        raise ValueError("L must be >= 1")
    return make_copy_instance(vocab, rng.integers(0, vocab.D, size=L))


def uniform_strings(vocab: Vocab, L: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, vocab.D, size=(count, L))


def has_repeated_ngram(x, n: int) -> bool:
    """Two equal windows ``x[i..i+n]`` at distinct offsets."""
    x = np.asarray(x, dtype=np.int64)
    return bool(kernels.repeated_windows(x[None, :], n + 1)[0])


def _check_unique_feasible(vocab: Vocab, L: int, n: int):
    if n < 0:
        raise ValueError("n must be >= 0")
    windows = L - n
    if windows > vocab.D ** (n + 1):
        raise RejectionError(
            f"no string of length {L} over {vocab.D} symbols avoids repeated "
            f"{n + 1}-token windows ({windows} windows, {vocab.D ** (n + 1)} distinct values)"
        )


def sample_unique_ngram_strings(
    vocab: Vocab, L: int, n: int, count: int, rng: np.random.Generator, max_retries: int = MAX_RETRIES
) -> np.ndarray:
    """``count`` uniform strings conditioned on having no repeated n-gram (``n + 1`` token window)."""
    _check_unique_feasible(vocab, L, n)
    out = np.empty((count, L), dtype=np.int64)
    filled = 0
    drawn = 0
    while filled < count:
        need = count - filled
        block = uniform_strings(vocab, L, max(need, 16), rng)
        ok = ~kernels.repeated_windows(block, n + 1, vocab.D)
        good = block[ok][:need]
        out[filled : filled + len(good)] = good
        filled += len(good)
        drawn += len(block)
        if filled < count and drawn > max_retries * max(count, 1):
            bound = L * L * float(vocab.D) ** (-n)
            raise RejectionError(
                f"rejection sampling exhausted after {drawn} draws; "
                f"observed reject rate {1 - filled / drawn:.4f}, union bound {bound:.3g}"
            )
    return out


def sample_unique_ngram_copy(
    vocab: Vocab, L: int, n: int, rng: np.random.Generator, max_retries: int = MAX_RETRIES
) -> CopyInstance:
    _check_unique_feasible(vocab, L, n)
    for attempt in range(max_retries):
        x = rng.integers(0, vocab.D, size=L)
        if not has_repeated_ngram(x, n):
            return make_copy_instance(vocab, x, {"n": n, "attempts": attempt + 1})
    bound = L * L * float(vocab.D) ** (-n)
    raise RejectionError(
        f"no string without repeated {n + 1}-token windows in {max_retries} draws "
        f"(D={vocab.D}, L={L}); union bound on collision probability {bound:.3g}"
    )


def _other_symbol(D: int, avoid: int, rng: np.random.Generator) -> int:
    if D < 2:
        return avoid
    v = int(rng.integers(0, D - 1))
    return v + (v >= avoid)


def plant_duplicate(x: np.ndarray, w: int, rng: np.random.Generator, D: int) -> tuple[np.ndarray, int, int]:
    """Copy a random length-``w`` window of ``x`` over a later, non-overlapping one.

    The token after the second copy is forced to differ from the token after the
    first (and likewise for the preceding tokens) whenever there is room.
    """
    x = np.array(x, dtype=np.int64)
    L = len(x)
    if L < 2 * w:
        raise ValueError(f"need L >= {2 * w} to plant two disjoint windows of length {w}")
    if L >= 2 * w + 1:
        a = int(rng.integers(0, L - 2 * w))  # a in [0, L-2w-1]
        b = int(rng.integers(a + w, L - w))  # b in [a+w, L-w-1], successor exists
    else:
        a, b = 0, w
    x[b : b + w] = x[a : a + w]
    if b + w < L and a + w < L:
        x[b + w] = _other_symbol(D, int(x[a + w]), rng)
    if a >= 1 and b - 1 >= a + w:
        x[b - 1] = _other_symbol(D, int(x[a - 1]), rng)
    return x, a, b


def sample_dup_ngram_copy(vocab: Vocab, L: int, n: int, rng: np.random.Generator) -> CopyInstance:
    """Uniform string with one planted repeated n-gram (window of ``n + 1`` tokens)."""
    x = rng.integers(0, vocab.D, size=L)
    x, a, b = plant_duplicate(x, n + 1, rng, vocab.D)
    return make_copy_instance(vocab, x, {"n": n, "dup_window": n + 1, "dup_at": [a, b]})


def _occurrences(ctx: np.ndarray, key: np.ndarray) -> list[int]:
    n = len(key)
    return [p for p in range(len(ctx) - n + 1) if np.array_equal(ctx[p : p + n], key)]


def sample_lookup(
    vocab: Vocab,
    L: int,
    n: int,
    k: int,
    variant: str,
    rng: np.random.Generator,
    max_retries: int = MAX_RETRIES,
) -> LookupInstance:
    """n-gram lookup: a key of ``n`` tokens from the context, answer = the ``k`` tokens after it.

    Layouts (answer and EOS are the loss targets)::

        suffix: BOS, context, COPY, key          | answer, EOS
        prefix: BOS, key, COPY, context, COPY    | answer, EOS
    """
    if variant not in ("suffix", "prefix"):
        raise ValueError(f"unknown lookup variant {variant!r}")
    if n < 1 or k < 1 or L < n + k:
        raise ValueError("need n >= 1, k >= 1 and L >= n + k")
    for _ in range(max_retries):
        ctx = rng.integers(0, vocab.D, size=L)
        q = int(rng.integers(0, L - n - k + 1))
        key = ctx[q : q + n]
        if _occurrences(ctx, key) != [q]:
            continue
        answer = ctx[q + n : q + n + k]
        if variant == "suffix":
            prompt = np.concatenate([[vocab.bos], ctx, [vocab.copy], key])
        else:
            prompt = np.concatenate([[vocab.bos], key, [vocab.copy], ctx, [vocab.copy]])
        tokens = np.concatenate([prompt, answer, [vocab.eos]]).astype(np.int64)
        mask = np.zeros(len(tokens), dtype=bool)
        mask[len(prompt) :] = True
        return LookupInstance(variant, ctx, key.copy(), answer.copy(), q, tokens, mask, len(prompt))
    raise RejectionError(f"no context with a unique {n}-token key in {max_retries} draws (D={vocab.D}, L={L})")


def sample_phonebook(
    vocab: Vocab,
    entries: int,
    rng: np.random.Generator,
    name_len: int = 3,
    number_len: int = 4,
    max_retries: int = MAX_RETRIES,
) -> LookupInstance:
    """Toy phone book: ``BOS, (name, number)*, COPY, name`` -> number, EOS."""
    if entries < 1:
        raise ValueError("phone book needs at least one entry")
    if entries > vocab.D**name_len:
        raise ValueError("not enough distinct names")
    names: list[tuple] = []
    seen = set()
    tries = 0
    while len(names) < entries:
        nm = tuple(int(t) for t in rng.integers(0, vocab.D, size=name_len))
        tries += 1
        if tries > max_retries * entries:
            raise RejectionError("could not draw distinct names")
        if nm not in seen:
            seen.add(nm)
            names.append(nm)
    numbers = rng.integers(0, vocab.D, size=(entries, number_len))
    book = np.concatenate([np.concatenate([np.array(nm), numbers[i]]) for i, nm in enumerate(names)])
    q = int(rng.integers(0, entries))
    key = np.array(names[q], dtype=np.int64)
    answer = numbers[q].astype(np.int64)
    prompt = np.concatenate([[vocab.bos], book, [vocab.copy], key])
    tokens = np.concatenate([prompt, answer, [vocab.eos]]).astype(np.int64)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[len(prompt) :] = True
    return LookupInstance(
        "phonebook", book, key, answer, q, tokens, mask, len(prompt), {"entries": entries}
    )


@dataclass
class Packed:
    tokens: np.ndarray
    mask: np.ndarray
    count: int


def pack_context(instances: Sequence, C: int, pad: int | None = None) -> Packed:
    """Greedily concatenate whole instances into a window of ``C`` tokens, EOS-padded."""
    if not instances:
        raise ValueError("nothing to pack")
    for inst in instances:
        if len(inst.tokens) > C:
            raise ValueError(f"instance of length {len(inst.tokens)} exceeds context {C}")
    if pad is None:
        # every instance ends with EOS, which doubles as the pad token
        pad = int(instances[0].tokens[-1])
    tokens = np.full(C, pad, dtype=np.int64)
    mask = np.zeros(C, dtype=bool)
    pos = 0
    count = 0
    for inst in instances:
        n = len(inst.tokens)
        if pos + n > C:
            break
        tokens[pos : pos + n] = inst.tokens
        mask[pos : pos + n] = inst.loss_mask
        pos += n
        count += 1
    return Packed(tokens, mask, count)


def sample_copy_length(L_max: int, rng: np.random.Generator, L_min: int = 1) -> int:
    return int(rng.integers(L_min, L_max + 1))


def sample_packed_copy_batch(
    vocab: Vocab, L_max: int, C: int, batch: int, rng: np.random.Generator, L_min: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Online training batch: ``batch`` rows of context ``C`` packed with copy instances."""
    if 2 * L_max + 3 > C:
        raise ValueError(f"context {C} cannot hold a copy instance of length {L_max}")
    toks = np.full((batch, C), vocab.eos, dtype=np.int64)
    mask = np.zeros((batch, C), dtype=bool)
    for r in range(batch):
        pos = 0
        while True:
            L = sample_copy_length(L_max, rng, L_min)
            n = 2 * L + 3
            if pos + n > C:
                break
            x = rng.integers(0, vocab.D, size=L)
            toks[r, pos] = vocab.bos
            toks[r, pos + 1 : pos + 1 + L] = x
            toks[r, pos + 1 + L] = vocab.copy
            toks[r, pos + 2 + L : pos + 2 + 2 * L] = x
            toks[r, pos + 2 + 2 * L] = vocab.eos
            mask[r, pos + 2 + L : pos + n] = True
            pos += n
    return toks, mask


def write_dataset(path, records: Iterable[Record]) -> int:
    count = 0
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json())
            f.write("\n")
            count += 1
    return count


def read_dataset(path) -> list[Record]:
    return [Record.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
