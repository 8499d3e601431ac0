"""Acceptance gates: one test per top-level capability, each with a pinned
tolerance and a wall-clock budget. These run the real components end to end;
the desk-scale pipeline test trains actual models and takes several minutes.
"""

import itertools
import time

import numpy as np

from distillab.checkpoint import Checkpoint, continuous_init, layer_jump_init
from distillab.cka import interlayer_matrix, linear_cka
from distillab.cli import main
from distillab.distill import DistillConfig, distill_loss, train_distill
from distillab.errors import InfeasibleTargetError
from distillab.finetune import (
    FinetuneConfig,
    MaskSpec,
    TriStageSchedule,
    ctc_loss,
    finetune,
    min_alignment_length,
    tri_stage_lr,
)
from distillab.model import AcousticModel, ModelConfig, PRESETS, init_params
from distillab.optim import grad_check
from distillab.splice import (
    SyllableSpan,
    Utterance,
    batch_mix,
    generate_synthetic_corpus,
    load_corpus,
    maybe_shuffle,
    shuffle_splice,
)
from distillab.tensor import (
    Tensor,
    add,
    concat,
    conv1d,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    no_grad,
    reshape,
    take,
    tmean,
    transpose,
    tsum,
)

TOY = ModelConfig(conv_layers=((4, 10, 5), (4, 4, 4)), d_model=8, n_layers=4,
                  n_heads=2, ffn_dim=16)


def desk_checkpoint(preset, seed):
    cfg = PRESETS[preset]
    model = AcousticModel(cfg, params=init_params(cfg, np.random.default_rng(seed)))
    return Checkpoint.from_model(model)


def toy_checkpoint(seed, layers=4):
    cfg = TOY.with_layers(layers)
    model = AcousticModel(cfg, params=init_params(cfg, np.random.default_rng(seed)))
    return Checkpoint.from_model(model)


def test_copied_student_has_zero_distill_loss():
    t0 = time.monotonic()
    teacher = desk_checkpoint("desk-teacher", 0)
    student = Checkpoint(teacher.config,
                         {k: v.copy() for k, v in teacher.tensors.items()})
    wav = np.random.default_rng(1).uniform(-0.5, 0.5, 8000)
    with no_grad():
        hs_t = teacher.to_model().forward(wav)
        hs_s = student.to_model().forward(wav)
    pairs = [(l, l) for l in range(1, teacher.config.n_layers + 1)]
    loss = distill_loss(hs_s, hs_t, pairs).item()
    assert abs(loss) <= 1e-6, f"identical models disagree: loss {loss}"
    assert time.monotonic() - t0 < 10.0


def test_gradient_suite_core_ops_and_full_graphs():
    t0 = time.monotonic()
    rng = np.random.default_rng(2)

    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    gamma = Tensor(rng.normal(size=(4,)), requires_grad=True)
    beta = Tensor(rng.normal(size=(4,)), requires_grad=True)
    probe = Tensor(rng.normal(size=(3, 4)))

    def dense(ps):
        xs, ws, bs, gs, zs = ps
        h = layer_norm(add(matmul(xs, ws), bs), gs, zs)
        return tsum(mul(log_softmax(h, axis=-1), probe))

    assert grad_check(dense, [x, w, b, gamma, beta]) < 1e-4

    sig = Tensor(rng.normal(size=(21, 2)), requires_grad=True)
    ker = Tensor(rng.normal(size=(3, 2, 5)), requires_grad=True)

    def convnet(ps):
        s, k = ps
        h = conv1d(s, k, stride=2)
        h = reshape(transpose(h, (1, 0)), (9, 3))
        h = concat([take(h, [0, 4, 8], axis=0), take(h, [1, 3, 5], axis=0)],
                   axis=0)
        return tmean(mul(gelu(h), h))

    assert grad_check(convnet, [sig, ker]) < 1e-4

    cfg = ModelConfig(conv_layers=((2, 7, 4),), d_model=4, n_layers=2,
                      n_heads=2, ffn_dim=4, dtype="f64")
    teacher = AcousticModel(cfg.with_layers(4),
                            params=init_params(cfg.with_layers(4),
                                               np.random.default_rng(3)))
    student = AcousticModel(cfg, params=init_params(cfg, np.random.default_rng(4)))
    wav = rng.uniform(-0.5, 0.5, 60)
    with no_grad():
        targets = teacher.forward(wav)
    checked = [student.params[k]
               for k in ("enc.1.attn.wq", "enc.2.ffn.b1", "proj.weight")]

    def distill_graph(_):
        hs = student.forward(wav, mode="train")
        return distill_loss(hs, targets, [(1, 2), (2, 4)])

    assert grad_check(distill_graph, checked) < 1e-3

    for target in ([1, 2], [1, 1]):
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)

        def ctc_graph(_):
            return ctc_loss(logits, target)

        assert grad_check(ctc_graph, [logits]) < 1e-3

    assert time.monotonic() - t0 < 120.0


def test_layer_init_copies_teacher_layers_bit_exact():
    t0 = time.monotonic()
    teacher = desk_checkpoint("desk-teacher", 5)
    suffixes = sorted({name.split(".", 2)[2]
                       for name in teacher.tensors if name.startswith("enc.")})

    jumped = layer_jump_init(teacher, 4)
    assert [4, 8] in jumped.extra["init"]["mapping"]
    for s, t in ((1, 2), (2, 4), (3, 6), (4, 8)):
        for suffix in suffixes:
            ours = jumped.tensors[f"enc.{s}.{suffix}"]
            theirs = teacher.tensors[f"enc.{t}.{suffix}"]
            assert ours.tobytes() == theirs.tobytes(), (s, t, suffix)

    chained = continuous_init(teacher, 4)
    assert chained.extra["init"]["mapping"] == [[i, i] for i in (1, 2, 3, 4)]
    for i in (1, 2, 3, 4):
        for suffix in suffixes:
            assert chained.tensors[f"enc.{i}.{suffix}"].tobytes() == \
                teacher.tensors[f"enc.{i}.{suffix}"].tobytes()
    assert time.monotonic() - t0 < 5.0


def test_cka_identities_and_bounds():
    t0 = time.monotonic()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(40, 8))
    y = rng.normal(size=(40, 6))
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))

    assert abs(linear_cka(x, x) - 1.0) <= 1e-6
    assert abs(linear_cka(x @ q, y) - linear_cka(x, y)) <= 1e-6
    assert abs(linear_cka(3.7 * x, y) - linear_cka(x, y)) <= 1e-6
    assert abs(linear_cka(x, y) - linear_cka(y, x)) <= 1e-10

    probe = [Utterance(f"p{i}", rng.uniform(-0.5, 0.5, 4000).astype(np.float32))
             for i in range(3)]
    a, b = toy_checkpoint(7), toy_checkpoint(8)
    cross = interlayer_matrix(a, b, probe).values
    assert (cross >= 0.0).all() and (cross <= 1.0).all()
    same = interlayer_matrix(a, a, probe).values
    assert (same >= 0.0).all() and (same <= 1.0).all()
    assert np.abs(np.diag(same) - 1.0).max() <= 1e-6
    assert time.monotonic() - t0 < 60.0


def test_splice_conservation_and_augmentation_rates():
    t0 = time.monotonic()
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(400, 3000))
        samples = rng.uniform(-1, 1, n).astype(np.float32)
        k = int(rng.integers(2, 6))
        cuts = np.sort(rng.choice(np.arange(1, n), size=2 * k, replace=False))
        spans = [SyllableSpan(int(cuts[2 * i]), int(cuts[2 * i + 1]), "ba")
                 for i in range(k)]
        utt = Utterance("u", samples)
        out = shuffle_splice(utt, spans, rng.permutation(k), 0.0)
        assert out.samples.size == n
        assert np.array_equal(np.sort(out.samples), np.sort(samples))
        ident = shuffle_splice(utt, spans, np.arange(k), 0.0)
        assert ident.samples.tobytes() == samples.tobytes()

    spans = [SyllableSpan(200, 600, "ba"), SyllableSpan(700, 1200, "ko"),
             SyllableSpan(1300, 1900, "du")]
    utt = Utterance("u0", rng.uniform(-1, 1, 2400).astype(np.float32))
    draw = np.random.default_rng([0, 55])
    shuffled = sum(1 for _ in range(10000)
                   if maybe_shuffle(utt, spans, draw, p_shuffle=0.375) is not utt)
    assert abs(shuffled / 10000 - 0.375) <= 0.01, shuffled

    draw = np.random.default_rng([0, 56])
    batch = [Utterance(f"u{i}", rng.uniform(-1, 1, 1600).astype(np.float32))
             for i in range(8)]
    mixed = 0
    for _ in range(1250):
        out = batch_mix(batch, draw, p_mix=0.15)
        mixed += sum(1 for got, src in zip(out, batch) if got is not src)
    assert abs(mixed / 10000 - 0.15) <= 0.01, mixed
    assert time.monotonic() - t0 < 120.0


def ctc_path_oracle(log_probs, target):
    """Sum path probabilities by brute enumeration; blank is index 0."""
    t_len, width = log_probs.shape
    total = -np.inf
    for path in itertools.product(range(width), repeat=t_len):
        collapsed = [lbl for lbl, _ in itertools.groupby(path) if lbl != 0]
        if collapsed == list(target):
            total = np.logaddexp(total,
                                 sum(log_probs[t, s] for t, s in enumerate(path)))
    return -total


def test_ctc_matches_path_enumeration_and_lr_schedule():
    t0 = time.monotonic()
    rng = np.random.default_rng(11)
    for v in (1, 2, 3):
        labels = range(1, v + 1)
        targets = [[]] + [[a] for a in labels] + \
            [[a, b] for a in labels for b in labels]
        for t_len in (1, 2, 3, 4):
            logits = Tensor(rng.normal(size=(t_len, v + 1)))
            lp = logits.data - np.log(np.exp(logits.data).sum(1, keepdims=True))
            for target in targets:
                if t_len < min_alignment_length(target):
                    try:
                        ctc_loss(logits, target)
                    except InfeasibleTargetError:
                        continue
                    raise AssertionError(f"{target} at T={t_len} should fail")
                got = ctc_loss(logits, target).item()
                want = ctc_path_oracle(lp, target)
                assert abs(got - want) < 1e-8, (t_len, v, target)

    sched = TriStageSchedule(1e-4, 2000, 8000, 20000)
    for step, want in ((0, 0.0), (2000, 1e-4), (10000, 1e-4), (20000, 0.0)):
        assert tri_stage_lr(step, sched) == want, step
    assert time.monotonic() - t0 < 60.0


def test_desk_scale_distillation_pipeline(tmp_path):
    """Train the full recipe at desk scale with pinned seeds: CTC teacher,
    jump-initialized spliced distillation, then matched-budget fine-tunes of
    the distilled student and a from-scratch twin."""
    t0 = time.monotonic()
    generate_synthetic_corpus({"n_utts": 200, "syllable_inventory_size": 12,
                               "syllables_per_utt_range": (2, 4),
                               "syllable_ms_range": (80, 140), "seed": 42},
                              tmp_path / "corpus")
    corpus = load_corpus(tmp_path / "corpus")

    teacher_ft = FinetuneConfig(steps=6000, accumulation=1,
                                sched=TriStageSchedule(3e-3, 600, 4200, 6000),
                                mask=MaskSpec(0.0, 0.0, 10, 8),
                                holdout_fraction=0.2, freeze_conv=False, seed=7)
    trained = finetune(desk_checkpoint("desk-teacher", 0), corpus.utterances,
                       corpus.transcripts, teacher_ft)
    teacher_cer = [cer for _, split, cer in trained.report if split == "dev"][-1]
    assert teacher_cer < 0.3, f"teacher stalled at dev CER {teacher_cer}"

    distilled = train_distill(trained.checkpoint, corpus, None,
                              DistillConfig(steps=500, init_mode="jump",
                                            student_layers=4, seed=11))
    assert not distilled.diverged
    first_loss, final_loss = distilled.trace[0][1], distilled.trace[-1][1]
    assert final_loss <= 0.5 * first_loss, (first_loss, final_loss)

    student_ft = FinetuneConfig(steps=4000, accumulation=1,
                                sched=TriStageSchedule(3e-3, 400, 2800, 4000),
                                mask=MaskSpec(0.0, 0.0, 10, 8),
                                holdout_fraction=0.2, freeze_conv=False, seed=7)
    cer = {}
    for name, start in (("distilled", distilled.student),
                        ("scratch", desk_checkpoint("desk-student", 0))):
        run = finetune(start, corpus.utterances, corpus.transcripts, student_ft)
        cer[name] = [c for _, split, c in run.report if split == "dev"][-1]
    assert cer["distilled"] <= cer["scratch"], cer
    assert time.monotonic() - t0 < 1800.0


def test_ablation_grid_reproducible_byte_for_byte(tmp_path):
    corpus = tmp_path / "corpus"
    assert main(["gen-corpus", "--out", str(corpus), "--n-utts", "8",
                 "--inventory", "8", "--min-syllables", "2", "--max-syllables",
                 "4", "--min-ms", "60", "--max-ms", "120", "--seed", "3"]) == 0
    teacher = tmp_path / "teacher"
    assert main(["init", "--preset", "desk-teacher", "--mode", "random",
                 "--out", str(teacher), "--seed", "1"]) == 0

    args = ["run-ablation", "--teacher", str(teacher), "--corpus", str(corpus),
            "--steps", "2", "--batch-size", "2", "--seed", "13"]
    first, second = tmp_path / "g1", tmp_path / "g2"
    assert main(args + ["--out", str(first)]) == 0
    assert main(args + ["--out", str(second)]) == 0
    for arm in ("jump-splice", "jump-nosplice", "continuous-splice",
                "continuous-nosplice"):
        assert (first / arm / "trace.csv").read_bytes() == \
            (second / arm / "trace.csv").read_bytes(), arm
    assert (first / "ablation.csv").read_bytes() == \
        (second / "ablation.csv").read_bytes()
