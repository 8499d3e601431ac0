"""CTC fine-tuning with a linear head, tri-stage learning rate, feature
masking, greedy decoding, and token error rate scoring.

The CTC loss is the forward algorithm in log space, expressed through the
differentiable ops of the tensor engine, so its gradient comes from the same
machinery as everything else. Scoring is unit-agnostic: the synthetic corpus
uses syllable tokens, so the reported error rate is a syllable error rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .errors import (
    ArgumentError,
    DegenerateInputError,
    InfeasibleTargetError,
    InputTooShortError,
    NumericError,
    ShapeError,
)
from .model import AcousticModel
from .optim import AdamState, adam_step
from .tensor import Tensor, concat, log_softmax, logaddexp, matmul, no_grad, record, take


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class TriStageSchedule:
    peak_lr: float = 1.0e-4
    warmup_steps: int = 2000
    hold_steps: int = 8000
    total_steps: int = 20000

    def __post_init__(self):
        if min(self.warmup_steps, self.hold_steps, self.total_steps) < 0 or self.peak_lr < 0:
            raise ArgumentError("schedule fields must be non-negative")
        if self.warmup_steps + self.hold_steps > self.total_steps:
            raise ArgumentError(
                f"warmup {self.warmup_steps} + hold {self.hold_steps} exceed total {self.total_steps}")


def tri_stage_lr(step: int, sched: TriStageSchedule) -> float:
    """0 -> peak over the warmup, flat peak through the hold, linear decay to
    0 at total_steps. Steps past the end clamp to 0."""
    if step < 0:
        raise ArgumentError(f"step must be non-negative, got {step}")
    if step >= sched.total_steps:
        return 0.0
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    if step < sched.warmup_steps + sched.hold_steps:
        return sched.peak_lr
    decay = sched.total_steps - sched.warmup_steps - sched.hold_steps
    return sched.peak_lr * (sched.total_steps - step) / decay


# ---------------------------------------------------------------------------
# feature masking


@dataclass(frozen=True)
class MaskSpec:
    frame_coverage: float = 0.55
    channel_coverage: float = 0.25
    frame_span: int = 10
    channel_span: int = 8

    def __post_init__(self):
        for name in ("frame_coverage", "channel_coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ArgumentError(f"{name} must be in [0,1], got {v}")
        if self.frame_span < 1 or self.channel_span < 1:
            raise ArgumentError("span lengths must be >= 1")


@dataclass
class MaskRecord:
    frame_mask: np.ndarray   # [T] bool, True = masked
    channel_mask: np.ndarray  # [c] bool, True = masked


def _cover(n: int, coverage: float, span: int, rng: np.random.Generator) -> np.ndarray:
    # Sample span starts until unique coverage reaches the target; each draw
    # adds at most `span` new positions, so overshoot stays below one span.
    # Rounding guard: 0.55 * 200 must mean exactly 110, not 110.0000000001.
    target = int(np.ceil(round(coverage * n, 9)))
    covered = np.zeros(n, dtype=bool)
    while int(covered.sum()) < target:
        start = int(rng.integers(0, n - span + 1))
        covered[start:start + span] = True
    return covered


def mask_features(frames: Tensor, spec: MaskSpec, rng: np.random.Generator,
                  mask_emb: Tensor | None = None) -> tuple[Tensor, MaskRecord]:
    """Mask frame spans (replaced by the learned embedding, or zeros when no
    embedding is given) and channel spans (zeroed). Frame spans are drawn
    first, then channel spans. Zero coverages leave the input untouched."""
    if frames.ndim != 2:
        raise ShapeError(f"expected [T, c] frames, got shape {frames.shape}")
    t, c = frames.shape
    frame_mask = np.zeros(t, dtype=bool)
    channel_mask = np.zeros(c, dtype=bool)
    if spec.frame_coverage > 0:
        if t <= spec.frame_span:
            raise InputTooShortError(
                f"{t} frames but frame masking needs more than {spec.frame_span}")
        frame_mask = _cover(t, spec.frame_coverage, spec.frame_span, rng)
    if spec.channel_coverage > 0:
        if c <= spec.channel_span:
            raise InputTooShortError(
                f"{c} channels but channel masking needs more than {spec.channel_span}")
        channel_mask = _cover(c, spec.channel_coverage, spec.channel_span, rng)

    out = frames
    np_dtype = frames.data.dtype
    if frame_mask.any():
        fm = Tensor(frame_mask.astype(np_dtype).reshape(-1, 1))
        keep = Tensor((~frame_mask).astype(np_dtype).reshape(-1, 1))
        if mask_emb is None:
            mask_emb = Tensor(np.zeros(c, dtype=np_dtype))
        out = out * keep + mask_emb * fm
    if channel_mask.any():
        out = out * Tensor((~channel_mask).astype(np_dtype))
    return out, MaskRecord(frame_mask, channel_mask)


# ---------------------------------------------------------------------------
# CTC


def _extended_labels(target) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_alignment_length(target) -> int:
    target = list(target)
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def ctc_loss(logits: Tensor, target) -> Tensor:
    """Negative log-probability of the target under all valid alignments,
    via the forward algorithm in log space. Blank is index 0."""
    if logits.ndim != 2:
        raise ShapeError(f"expected [T, V+1] logits, got shape {logits.shape}")
    t_len, width = logits.shape
    target = [int(x) for x in target]
    for lbl in target:
        if not 1 <= lbl <= width - 1:
            raise ArgumentError(f"label id {lbl} outside vocabulary 1..{width - 1}")
    if t_len < min_alignment_length(target):
        raise InfeasibleTargetError(
            f"target needs at least {min_alignment_length(target)} frames, got {t_len}")

    lp = log_softmax(logits, axis=-1)
    ext = _extended_labels(target)
    big_l = len(ext)
    np_dtype = logits.data.dtype
    neg_inf = np.array(-np.inf, dtype=np_dtype)

    init = np.full(big_l, neg_inf, dtype=np_dtype)
    init[0] = 0.0
    if big_l > 1:
        init[1] = 0.0
    alpha = take(take(lp, 0), ext) + Tensor(init)

    if big_l >= 3:
        # Skip transition s-2 -> s allowed only into a non-blank that differs
        # from the label two slots back.
        skip_ok = np.full(big_l, neg_inf, dtype=np_dtype)
        for s in range(2, big_l):
            if ext[s] != 0 and ext[s] != ext[s - 2]:
                skip_ok[s] = 0.0
        skip_mask = Tensor(skip_ok)
        pad2 = Tensor(np.full(2, neg_inf, dtype=np_dtype))
    pad1 = Tensor(np.full(1, neg_inf, dtype=np_dtype))

    for t in range(1, t_len):
        shifted = concat([pad1, take(alpha, np.arange(big_l - 1))])
        combined = logaddexp(alpha, shifted)
        if big_l >= 3:
            shifted2 = concat([pad2, take(alpha, np.arange(big_l - 2))])
            combined = logaddexp(combined, shifted2 + skip_mask)
        alpha = combined + take(take(lp, t), ext)

    if big_l == 1:
        total = take(alpha, 0)
    else:
        total = logaddexp(take(alpha, big_l - 1), take(alpha, big_l - 2))
    return -total


def ctc_greedy_decode(logits) -> list[int]:
    """Per-frame argmax, collapse consecutive repeats, drop blanks."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    path = data.argmax(axis=-1)
    out = []
    prev = -1
    for p in path:
        p = int(p)
        if p != prev and p != 0:
            out.append(p)
        prev = p
    return out


def token_error_rate(hyp, ref) -> float:
    """Levenshtein distance with unit costs divided by the reference length."""
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise ArgumentError("reference sequence is empty")
    return edit_distance(hyp, ref) / len(ref)


def edit_distance(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class CtcHead:
    weight: Tensor  # [d_model, vocab+1]
    bias: Tensor    # [vocab+1]
    vocab: tuple[str, ...]

    def __post_init__(self):
        if self.weight.shape[1] != len(self.vocab) + 1 or self.bias.shape != (len(self.vocab) + 1,):
            raise ArgumentError("head output width must be vocab size + 1")

    def logits(self, states: Tensor) -> Tensor:
        return matmul(states, self.weight) + self.bias


@dataclass
class FinetuneConfig:
    steps: int
    accumulation: int = 8
    sched: TriStageSchedule = field(default_factory=TriStageSchedule)
    mask: MaskSpec = field(default_factory=MaskSpec)
    holdout_fraction: float = 0.2
    freeze_conv: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ArgumentError(f"steps must be >= 0, got {self.steps}")
        if self.accumulation < 1:
            raise ArgumentError(f"accumulation must be >= 1, got {self.accumulation}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ArgumentError(f"holdout_fraction must be in [0,1), got {self.holdout_fraction}")


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    report: list[tuple[int, str, float]]  # (epoch, split, cer)
    trace: list[tuple[int, float]]        # (micro_step, loss)
    hyps: dict[str, list[str]]
    vocab: list[str]
    diverged: bool = False


def build_vocab(transcripts: dict[str, list[str]]) -> list[str]:
    return sorted({lbl for labels in transcripts.values() for lbl in labels})


def labels_to_ids(labels, vocab) -> list[int]:
    index = {lbl: i + 1 for i, lbl in enumerate(vocab)}
    try:
        return [index[lbl] for lbl in labels]
    except KeyError as e:
        raise ArgumentError(f"label {e.args[0]!r} not in vocabulary")


def ids_to_labels(ids, vocab) -> list[str]:
    return [vocab[i - 1] for i in ids]


def evaluate_ctc(model: AcousticModel, head: CtcHead, utts, transcripts) -> tuple[float, dict]:
    """Greedy-decode every utterance; corpus-level error rate is total edit
    distance over total reference length."""
    total_dist = 0
    total_ref = 0
    hyps = {}
    with no_grad():
        for u in utts:
            normed = model.encode_normed(u.samples, mode="eval")
            ids = ctc_greedy_decode(head.logits(normed))
            hyp = ids_to_labels(ids, head.vocab)
            hyps[u.id] = hyp
            ref = transcripts[u.id]
            total_dist += edit_distance(hyp, ref)
            total_ref += len(ref)
    if total_ref == 0:
        raise DegenerateInputError("no reference tokens to score against")
    return total_dist / total_ref, hyps


def split_corpus(utts, holdout_fraction: float, rng: np.random.Generator):
    if len(utts) < 2 or holdout_fraction == 0.0:
        return list(utts), list(utts)
    order = rng.permutation(len(utts))
    n_dev = max(1, int(round(holdout_fraction * len(utts))))
    n_dev = min(n_dev, len(utts) - 1)
    dev = [utts[int(i)] for i in order[:n_dev]]
    train = [utts[int(i)] for i in order[n_dev:]]
    return train, dev


def finetune(ckpt: Checkpoint, corpus, transcripts, cfg: FinetuneConfig) -> FinetuneResult:
    """Attach a CTC head and train with Adam under the tri-stage schedule,
    one utterance per micro-step, gradient accumulation between updates, and
    feature masking on the conv features. Emits a per-epoch held-out error
    report (epoch 0 is the untrained baseline). Deterministic per seed; a
    non-finite loss aborts with the last updated weights kept."""
    utts = corpus.utterances if hasattr(corpus, "utterances") else list(corpus)
    if not utts:
        raise ArgumentError("empty corpus")
    missing = [u.id for u in utts if u.id not in transcripts]
    if missing:
        raise ArgumentError(f"transcripts missing for {missing[:3]}")

    vocab = build_vocab({u.id: transcripts[u.id] for u in utts})
    targets = {u.id: labels_to_ids(transcripts[u.id], vocab) for u in utts}

    model = ckpt.to_model()
    d_model = model.config.d_model
    c_feat = model.config.conv_layers[-1][0]
    np_dtype = model.np_dtype
    rng_init = np.random.default_rng([cfg.seed, 3])
    if "head.weight" in ckpt.tensors and ckpt.extra.get("vocab") == list(vocab):
        head = CtcHead(Tensor(ckpt.tensors["head.weight"].copy(), requires_grad=True),
                       Tensor(ckpt.tensors["head.bias"].copy(), requires_grad=True),
                       tuple(vocab))
        mask_emb = Tensor(ckpt.tensors["mask_emb"].copy(), requires_grad=True) \
            if "mask_emb" in ckpt.tensors else \
            Tensor((0.1 * rng_init.standard_normal(c_feat)).astype(np_dtype), requires_grad=True)
    else:
        width = len(vocab) + 1
        head = CtcHead(
            Tensor((rng_init.standard_normal((d_model, width)) / np.sqrt(d_model)).astype(np_dtype),
                   requires_grad=True),
            Tensor(np.zeros(width, dtype=np_dtype), requires_grad=True),
            tuple(vocab))
        mask_emb = Tensor((0.1 * rng_init.standard_normal(c_feat)).astype(np_dtype),
                          requires_grad=True)

    rng_split = np.random.default_rng([cfg.seed, 4])
    train_utts, dev_utts = split_corpus(utts, cfg.holdout_fraction, rng_split)

    trainable = {name: p for name, p in model.params.items()
                 if not (cfg.freeze_conv and name.startswith("conv."))}
    if cfg.freeze_conv:
        for name, p in model.params.items():
            if name.startswith("conv."):
                p.requires_grad = False
    trainable["head.weight"] = head.weight
    trainable["head.bias"] = head.bias
    trainable["mask_emb"] = mask_emb
    names = list(trainable)
    opt = AdamState(lr=cfg.sched.peak_lr)

    baseline_cer, hyps = evaluate_ctc(model, head, dev_utts, transcripts)
    report: list[tuple[int, str, float]] = [(0, "dev", baseline_cer)]
    trace: list[tuple[int, float]] = []
    diverged = False

    rng_data = np.random.default_rng([cfg.seed, 5])
    rng_mask = np.random.default_rng([cfg.seed, 6])
    n_train = len(train_utts)
    boundaries = sorted(set(range(n_train, cfg.steps + 1, n_train)) | {cfg.steps}) \
        if cfg.steps > 0 else []
    epoch = 0
    order = rng_data.permutation(n_train)
    pos = 0
    updates = 0
    accumulated = 0

    for micro in range(1, cfg.steps + 1):
        if pos == n_train:
            order = rng_data.permutation(n_train)
            pos = 0
        u = train_utts[int(order[pos])]
        pos += 1

        # A blown-up run surfaces either as a non-finite loss or as the
        # engine's NaN guard firing mid-forward; both abort the same way.
        try:
            with record(mode="train") as g:
                feats = model.forward_features(u.samples)
                masked, _ = mask_features(feats, cfg.mask, rng_mask, mask_emb)
                normed = model.encode_normed(u.samples, mode="train", features=masked)
                loss = ctc_loss(head.logits(normed), targets[u.id]) * (1.0 / cfg.accumulation)
                loss_val = float(loss.item()) * cfg.accumulation
                if not np.isfinite(loss_val):
                    diverged = True
                    break
                g.backward(loss)
        except NumericError:
            diverged = True
            break
        trace.append((micro, loss_val))
        accumulated += 1

        if accumulated == cfg.accumulation or micro == cfg.steps:
            lr = tri_stage_lr(updates + 1, cfg.sched)
            grads = [trainable[n].grad if trainable[n].grad is not None
                     else np.zeros_like(trainable[n].data) for n in names]
            adam_step([trainable[n] for n in names], grads, opt, lr=lr)
            for n in names:
                trainable[n].zero_grad()
            updates += 1
            accumulated = 0

        if boundaries and micro == boundaries[0]:
            boundaries.pop(0)
            epoch += 1
            cer, hyps = evaluate_ctc(model, head, dev_utts, transcripts)
            report.append((epoch, "dev", cer))

    if diverged:
        cer, hyps = evaluate_ctc(model, head, dev_utts, transcripts)
        report.append((epoch + 1, "dev", cer))

    for name, p in model.params.items():
        p.requires_grad = True
    out = Checkpoint.from_model(model, extra=dict(ckpt.extra))
    out.tensors["head.weight"] = head.weight.data.copy()
    out.tensors["head.bias"] = head.bias.data.copy()
    out.tensors["mask_emb"] = mask_emb.data.copy()
    out.extra["vocab"] = list(vocab)
    out.extra["finetune"] = {"steps": len(trace), "updates": updates,
                             "seed": cfg.seed, "diverged": diverged}
    return FinetuneResult(out, report, trace, hyps, list(vocab), diverged)


def load_head(ckpt: Checkpoint) -> CtcHead:
    if "head.weight" not in ckpt.tensors or "vocab" not in ckpt.extra:
        raise ArgumentError("checkpoint carries no CTC head")
    return CtcHead(Tensor(ckpt.tensors["head.weight"].copy()),
                   Tensor(ckpt.tensors["head.bias"].copy()),
                   tuple(ckpt.extra["vocab"]))


def write_report(report, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "cer"])
        for epoch, split, cer in report:
            w.writerow([epoch, split, repr(float(cer))])


def read_report(path) -> list[tuple[int, str, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["epoch", "split", "cer"]:
        raise ArgumentError(f"{path}: expected header epoch,split,cer")
    return [(int(r[0]), r[1], float(r[2])) for r in rows[1:]]


def write_hyps(hyps: dict[str, list[str]], path) -> None:
    lines = [f"{utt_id}\t{' '.join(tokens)}" for utt_id, tokens in hyps.items()]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
