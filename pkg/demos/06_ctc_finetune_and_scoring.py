"""
CTC fine-tuning with a tri-stage schedule, plus decoding and scoring
====================================================================

"""

import tempfile
from pathlib import Path

import numpy as np

from distillab.checkpoint import Checkpoint
from distillab.finetune import (FinetuneConfig, MaskSpec, TriStageSchedule,
                                edit_distance, evaluate_ctc, finetune,
                                load_head, tri_stage_lr)
from distillab.model import AcousticModel, ModelConfig, init_params
from distillab.splice import generate_synthetic_corpus, load_corpus

# The schedule warms up linearly, holds at the peak, then decays to zero.
sched = TriStageSchedule(peak_lr=1e-3, warmup_steps=30, hold_steps=200,
                         total_steps=300)
for step in (0, 15, 30, 200, 260, 300):
    print(f"lr at step {step:3d}: {tri_stage_lr(step, sched):.2e}")

# Error rates come from edit distance over syllable tokens.
ref, hyp = ["ba", "ko", "du"], ["ba", "du"]
print("\ncer(ba ko du -> ba du):", edit_distance(ref, hyp) / len(ref))

# A tiny corpus and model make the fine-tune run in well under a minute.
out = Path(tempfile.mkdtemp(prefix="distillab-demo-")) / "corpus"
generate_synthetic_corpus({"n_utts": 10, "syllable_inventory_size": 4,
                           "syllables_per_utt_range": (2, 3),
                           "syllable_ms_range": (60, 100), "seed": 4}, out)
corpus = load_corpus(out)

cfg = ModelConfig(conv_layers=((8, 10, 5), (8, 8, 4), (8, 4, 4)), d_model=16,
                  n_layers=2, n_heads=2, ffn_dim=32)
start = Checkpoint.from_model(
    AcousticModel(cfg, params=init_params(cfg, np.random.default_rng(0))))

# finetune() attaches a fresh CTC head over the corpus vocabulary, splits
# off a holdout, and reports dev CER at each epoch boundary.
run_cfg = FinetuneConfig(steps=400, accumulation=1,
                         sched=TriStageSchedule(3e-3, 40, 280, 400),
                         mask=MaskSpec(0.0, 0.0, 10, 8),
                         holdout_fraction=0.2, freeze_conv=False, seed=1)
result = finetune(start, corpus.utterances, corpus.transcripts, run_cfg)
devs = [(epoch, round(c, 3)) for epoch, split, c in result.report
        if split == "dev"]
print("\ndev CER by epoch:", devs[:3], "...", devs[-2:])

# The returned checkpoint carries the head, so it can be scored directly
# against any utterance set with greedy decoding.
score, hyps = evaluate_ctc(result.checkpoint.to_model(),
                           load_head(result.checkpoint),
                           corpus.utterances, corpus.transcripts)
print(f"corpus CER after fine-tune: {score:.3f}")
utt0 = corpus.utterances[0].id
print(f"{utt0}: ref={corpus.transcripts[utt0]} hyp={hyps[utt0]}")
