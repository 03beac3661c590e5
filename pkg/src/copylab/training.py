"""Masked next-token training with AdamW, checkpoints and a metrics log."""

from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tape, leaves
from .models import ModelSpec, TrainedModel, forward, init_params, n_params
from .numerics import make_rng
from .tasks import Vocab, sample_packed_copy_batch

CHECKPOINT_MAGIC = b"CPYLAB01"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-5
    warmup: int = 300
    steps: int = 2000
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 64
    context: int = 256
    seed: int = 0
    eval_every: int = 0
    target_char_acc: float | None = None  # stop early once reached at an eval

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")


@dataclass
class CopyTaskConfig:
    D: int = 10
    L_max: int = 20
    L_min: int = 1


def lr_factor(step: int, warmup: int, total: int) -> float:
    """Linear warmup to 1 over ``warmup`` steps, then linear decay reaching 0 at ``total``."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if warmup and step <= warmup:
        return step / warmup
    if total <= warmup:
        return 1.0
    return max(0.0, (total - step) / (total - warmup))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig, step: int
) -> float:
    """In-place AdamW update; weight decay applies to matrices only. Returns the lr used."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    lr = cfg.lr * lr_factor(step, cfg.warmup, cfg.steps)
    b1, b2 = cfg.betas
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        if p.ndim >= 2 and cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mh = m / (1 - b1**step)
        vh = v / (1 - b2**step)
        p -= lr * mh / (np.sqrt(vh) + cfg.eps)
    return lr


def masked_next_token_loss(spec: ModelSpec, params: dict[str, np.ndarray], tokens, mask):
    """Cross-entropy of predicting ``tokens[:, t+1]`` at ``t``, averaged where ``mask[:, t+1]``.

    Returns ``(loss, tape, leaves)`` so callers can differentiate.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if tokens.shape != mask.shape:
        raise ValueError("mask must align with tokens")
    tape = Tape()
    P = leaves(params)
    z = forward(tape, spec, P, tokens[:, :-1])
    loss = tape.masked_cross_entropy(z, tokens[:, 1:], mask[:, 1:])
    return loss, tape, P


def loss_and_grads(spec, params, tokens, mask):
    loss, tape, P = masked_next_token_loss(spec, params, tokens, mask)
    return float(loss.data), tape.grads_for(loss, P)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], spec: ModelSpec | None = None, extra: dict | None = None):
    """Binary layout: magic, u32 count, then per tensor: u16 name length, name,
    u8 ndim, u64 dims, little-endian float64 payload in row-major order.
    A ``.manifest`` text file lists the tensors and the model spec."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            a = np.ascontiguousarray(params[name], dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())
    lines = [f"format = {CHECKPOINT_MAGIC.decode()}", f"tensors = {len(params)}", f"parameters = {n_params(params)}"]
    if spec is not None:
        lines.append(f"model = {json.dumps(spec.to_dict(), sort_keys=True)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    for name in sorted(params):
        lines.append(f"tensor {name} = {'x'.join(map(str, params[name].shape)) or 'scalar'}")
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    out = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nl].decode()
        off += nl
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}Q", data, off)
        off += 8 * nd
        size = int(np.prod(shape)) if nd else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return out


def load_model_spec(path) -> ModelSpec:
    for line in Path(str(path) + ".manifest").read_text().splitlines():
        if line.startswith("model = "):
            return ModelSpec(**json.loads(line[len("model = ") :]))
    raise ValueError("manifest has no model line")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    spec: ModelSpec
    rows: list  # metric dicts, one per logged step
    steps_run: int
    stopped_early: bool
    seconds: float

    def model(self, name: str = "model") -> TrainedModel:
        return TrainedModel(self.spec, self.params, name)


def train(
    spec: ModelSpec,
    task: CopyTaskConfig,
    cfg: TrainConfig,
    evaluate: Callable[[TrainedModel], dict] | None = None,
    log_every: int = 1,
    on_row: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Online training on freshly sampled packed copy batches.

    Parameters, data and the optimizer draw from separate streams of ``cfg.seed``,
    so a fixed seed reproduces the whole trajectory.
    """
    vocab = Vocab(task.D)
    if spec.vocab_size != vocab.size:
        raise ValueError(f"model vocabulary {spec.vocab_size} != task vocabulary {vocab.size}")
    params = init_params(spec, make_rng(cfg.seed, 1))
    data_rng = make_rng(cfg.seed, 2)
    state = AdamState()
    rows = []
    t0 = time.time()
    stopped = False
    step = 0
    for step in range(1, cfg.steps + 1):
        toks, mask = sample_packed_copy_batch(vocab, task.L_max, cfg.context, cfg.batch, data_rng, task.L_min)
        loss, grads = loss_and_grads(spec, params, toks, mask)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr factor {lr_factor(step, cfg.warmup, cfg.steps):.3g})")
        lr = adamw_step(params, grads, state, cfg, step)
        row = {"step": step, "loss": loss, "lr": lr}
        if evaluate is not None and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            row.update(evaluate(TrainedModel(spec, params)))
        if step % log_every == 0 or len(row) > 3:
            rows.append(row)
            if on_row is not None:
                on_row(row)
        if cfg.target_char_acc is not None and row.get("char_acc", -1.0) >= cfg.target_char_acc:
            stopped = True
            break
    return TrainResult(params, spec, rows, step, stopped, time.time() - t0)


def write_metrics_csv(rows: list[dict], path) -> None:
    cols = ["step", "loss", "lr"]
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=cols, restval="")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
