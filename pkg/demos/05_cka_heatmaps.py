"""
Comparing layers across models with centered kernel alignment
=============================================================

"""

import tempfile
from pathlib import Path

import numpy as np

from distillab.checkpoint import Checkpoint, layer_jump_init
from distillab.cka import export_heatmap, interlayer_matrix, linear_cka
from distillab.model import AcousticModel, ModelConfig, init_params
from distillab.splice import Utterance

# CKA scores two activation matrices in [0, 1], ignoring rotations and
# uniform rescaling of the feature axes.
rng = np.random.default_rng(0)
x = rng.normal(size=(50, 8))
q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
print(f"cka(x, x)        = {linear_cka(x, x):.6f}")
print(f"cka(x @ Q, x)    = {linear_cka(x @ q, x):.6f}")
print(f"cka(3.7 x, x)    = {linear_cka(3.7 * x, x):.6f}")
print(f"cka(x, noise)    = {linear_cka(x, rng.normal(size=(50, 8))):.6f}")

# For models, every layer of one is scored against every layer of the
# other over a shared probe set. State 0 is the encoder input.
cfg = ModelConfig(conv_layers=((4, 10, 5), (4, 4, 4)), d_model=8, n_layers=4,
                  n_heads=2, ffn_dim=16)
teacher = Checkpoint.from_model(
    AcousticModel(cfg, params=init_params(cfg, np.random.default_rng(1))))
student = layer_jump_init(teacher, 2)
probe = [Utterance(f"p{i}", rng.uniform(-0.5, 0.5, 4000).astype(np.float32))
         for i in range(3)]

matrix = interlayer_matrix(student, teacher, probe)
print("\nstudent state x teacher state:")
for i, row in enumerate(matrix.values):
    print(" ", i, " ".join(f"{v:.3f}" for v in row))

# A model scored against itself has a unit diagonal; off-diagonal decay
# shows how quickly representations drift across layers. With a trained
# teacher the jump-initialized rows peak at their source columns.
same = interlayer_matrix(teacher, teacher, probe)
print("\nsame-model diagonal:", np.round(np.diag(same.values), 6))

# Heatmaps export as labeled CSV plus an 8-bit PGM image.
out = Path(tempfile.mkdtemp(prefix="distillab-demo-"))
export_heatmap(matrix, out / "cka.csv", out / "cka.pgm")
print("\nwrote", out / "cka.csv", "and", out / "cka.pgm")
print((out / "cka.csv").read_text().splitlines()[0])
