"""
Distilling hidden states into a smaller student
===============================================

"""

import tempfile
from pathlib import Path

import numpy as np

from distillab.checkpoint import Checkpoint
from distillab.distill import DistillConfig, default_pairs, train_distill
from distillab.model import AcousticModel, ModelConfig, init_params
from distillab.splice import generate_synthetic_corpus, load_corpus

# A small corpus and a toy 4-layer teacher keep this demo at a few seconds.
out = Path(tempfile.mkdtemp(prefix="distillab-demo-")) / "corpus"
generate_synthetic_corpus({"n_utts": 8, "syllable_inventory_size": 8,
                           "syllables_per_utt_range": (2, 3),
                           "syllable_ms_range": (60, 100), "seed": 2}, out)
corpus = load_corpus(out)

cfg = ModelConfig(conv_layers=((8, 10, 5), (8, 8, 4), (8, 4, 4)), d_model=16,
                  n_layers=4, n_heads=2, ffn_dim=32)
teacher = Checkpoint.from_model(
    AcousticModel(cfg, params=init_params(cfg, np.random.default_rng(0))))

# The student trains on the mean squared error between its hidden states
# and the teacher's, over a fixed set of (student layer, teacher layer)
# pairs. The deepest pair is pinned to the two final layers.
print("layer pairs:", default_pairs(2, 4))

cfg_run = DistillConfig(steps=60, lr=1e-3, batch_size=4, p_shuffle=0.375,
                        p_mix=0.15, init_mode="jump", student_layers=2, seed=3)
result = train_distill(teacher, corpus, None, cfg_run)

# The trace is a list of (step, loss) pairs; matching layers that were
# copied verbatim start close and keep improving.
losses = [loss for _, loss in result.trace]
print(f"step   1 loss: {losses[0]:.2f}")
print(f"step  30 loss: {losses[29]:.2f}")
print(f"step  60 loss: {losses[-1]:.2f}")
print("diverged:", result.diverged)
print("student layers:", result.student.config.n_layers)

# Turning the splicing and mixing off makes runs directly comparable;
# seeds fix everything else, so a rerun reproduces the trace exactly.
again = train_distill(teacher, corpus, None, cfg_run)
print("same seed, same trace:",
      [l for _, l in again.trace] == losses)
