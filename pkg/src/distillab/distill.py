"""Multi-layer hidden-state distillation.

The objective is a sum over (student_layer, teacher_layer) pairs of the MSE
between the two hidden states, teacher side detached. The training loop wires
together teacher, student (initialized by layer-jumping, continuous copy, or
random draw), the splice/mix augmentation pipeline, and Adam at a constant
learning rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, continuous_init, layer_jump_init
from .errors import ArgumentError, DegenerateInputError, DepthError, NumericError, ShapeError
from .model import AcousticModel, HiddenStates, init_params
from .optim import AdamState, adam_step
from .splice import batch_mix, maybe_shuffle
from .tensor import Tensor, no_grad, record, tmean, tsum

LayerPairSet = list[tuple[int, int]]

INIT_MODES = ("jump", "continuous", "random")


def validate_pairs(pairs: LayerPairSet, d_s: int, d_t: int) -> None:
    seen = set()
    for s, t in pairs:
        if not (1 <= s <= d_s and 1 <= t <= d_t):
            raise ArgumentError(
                f"pair ({s},{t}) out of range for student depth {d_s}, teacher depth {d_t}")
        if (s, t) in seen:
            raise ArgumentError(f"duplicate pair ({s},{t})")
        seen.add((s, t))


def default_pairs(d_s: int, d_t: int) -> LayerPairSet:
    """Three depths, spaced thirds of the student stack, deepest pair pinned
    to (d_s, d_t). Intermediate teacher layers sit at twice the student index."""
    if d_t < 2 * d_s:
        raise DepthError(f"default pairs need teacher depth >= 2x student: teacher {d_t}, student {d_s}")
    pairs: LayerPairSet = []
    for k in (1, 2):
        s = max(1, round(k * d_s / 3))
        if (s, 2 * s) not in pairs:
            pairs.append((s, 2 * s))
    if (d_s, d_t) not in pairs:
        pairs.append((d_s, d_t))
    return pairs


@dataclass
class DistillConfig:
    steps: int
    lr: float = 2.0e-4
    batch_size: int = 6
    p_shuffle: float = 0.375
    p_mix: float = 0.15
    init_mode: str = "jump"
    freeze_conv: bool = True
    pairs: LayerPairSet | None = None
    seed: int = 0
    student_layers: int | None = None  # default: half the teacher depth

    def __post_init__(self):
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        for name in ("p_shuffle", "p_mix"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ArgumentError(f"{name} must be in [0,1], got {v}")
        if self.init_mode not in INIT_MODES:
            raise ArgumentError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")


def mse(a: Tensor, b: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared difference over unmasked frames, all channels."""
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    sq = diff * diff
    if mask is None:
        return tmean(sq)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a.shape[0],):
        raise ShapeError(f"mask shape {mask.shape} does not match {a.shape[0]} frames")
    keep = ~mask
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise DegenerateInputError("all frames masked; mse undefined")
    d = a.shape[1] if a.ndim > 1 else 1
    weights = Tensor(keep.astype(sq.data.dtype).reshape(-1, *([1] * (a.ndim - 1))))
    return tsum(sq * weights) * (1.0 / (n_kept * d))


def distill_loss(student: HiddenStates, teacher: HiddenStates, pairs: LayerPairSet,
                 mask: np.ndarray | None = None) -> Tensor:
    """Sum over pairs (s, t) of mse(student.states[s], teacher.states[t]),
    teacher side detached. Empty pair set gives a zero constant."""
    validate_pairs(pairs, student.n_layers, teacher.n_layers)
    if not pairs:
        return Tensor(np.zeros((), dtype=np.float32))
    total = None
    for s, t in pairs:
        term = mse(student.states[s], teacher.states[t].detach(), mask)
        total = term if total is None else total + term
    return total


@dataclass
class DistillResult:
    student: Checkpoint
    trace: list[tuple[int, float]]
    diverged: bool = False
    pairs: LayerPairSet = field(default_factory=list)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in trace:
            w.writerow([step, repr(float(loss))])


def read_trace(path) -> list[tuple[int, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["step", "loss"]:
        raise ArgumentError(f"{path}: expected header step,loss")
    return [(int(r[0]), float(r[1])) for r in rows[1:]]


def init_student(teacher: Checkpoint, cfg: DistillConfig) -> Checkpoint:
    d_s = cfg.student_layers if cfg.student_layers is not None else teacher.config.n_layers // 2
    if cfg.init_mode == "jump":
        return layer_jump_init(teacher, d_s)
    if cfg.init_mode == "continuous":
        return continuous_init(teacher, d_s)
    config = teacher.config.with_layers(d_s)
    params = init_params(config, np.random.default_rng([cfg.seed, 17]))
    tensors = {name: p.data.copy() for name, p in params.items()}
    return Checkpoint(config, tensors, {"init": {"mode": "random", "mapping": []}})


def train_distill(teacher: Checkpoint, corpus, alignments, cfg: DistillConfig) -> DistillResult:
    """Run the distillation loop. Deterministic for a fixed cfg.seed: batch
    sampling, shuffling, mixing, and any layerdrop all derive from it. A
    non-finite loss aborts the run and keeps the last good student weights.
    """
    utts = corpus.utterances if hasattr(corpus, "utterances") else list(corpus)
    if alignments is None and hasattr(corpus, "spans"):
        alignments = corpus.spans
    if not utts:
        raise ArgumentError("empty corpus")

    student_ck = init_student(teacher, cfg)
    pairs = cfg.pairs if cfg.pairs is not None else default_pairs(
        student_ck.config.n_layers, teacher.config.n_layers)
    validate_pairs(pairs, student_ck.config.n_layers, teacher.config.n_layers)

    teacher_model = teacher.to_model()
    student = student_ck.to_model()
    trained = {name: p for name, p in student.params.items()
               if not (cfg.freeze_conv and name.startswith("conv."))}
    names = list(trained)
    opt = AdamState(lr=cfg.lr)

    rng_data = np.random.default_rng([cfg.seed, 1])
    rng_drop = np.random.default_rng([cfg.seed, 2])
    n = len(utts)
    trace: list[tuple[int, float]] = []
    diverged = False

    for step in range(1, cfg.steps + 1):
        idx = rng_data.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        batch = [utts[int(i)] for i in idx]
        batch = [maybe_shuffle(u, alignments.get(u.id, []), rng_data, cfg.p_shuffle)
                 for u in batch]
        batch = batch_mix(batch, rng_data, cfg.p_mix)

        targets = []
        with no_grad():
            for u in batch:
                targets.append(teacher_model.forward(u.samples, mode="eval"))

        # A blown-up run surfaces either as a non-finite loss or as the
        # engine's NaN guard firing mid-forward; both abort the same way.
        try:
            with record(mode="train") as g:
                total = None
                for u, hs_t in zip(batch, targets):
                    hs_s = student.forward(u.samples, mode="train", rng=rng_drop)
                    term = distill_loss(hs_s, hs_t, pairs)
                    total = term if total is None else total + term
                loss = total * (1.0 / len(batch))
                loss_val = float(loss.item())
                if not np.isfinite(loss_val):
                    diverged = True
                    break
                g.backward(loss)
        except NumericError:
            diverged = True
            break

        grads = [trained[name].grad if trained[name].grad is not None
                 else np.zeros_like(trained[name].data) for name in names]
        adam_step([trained[name] for name in names], grads, opt)
        for name in names:
            trained[name].zero_grad()
        trace.append((step, loss_val))

    out = Checkpoint.from_model(student, extra=dict(student_ck.extra))
    out.extra["distill"] = {"pairs": [list(p) for p in pairs], "steps": len(trace),
                            "seed": cfg.seed, "init_mode": cfg.init_mode,
                            "diverged": diverged}
    return DistillResult(out, trace, diverged, pairs)
