"""
Initializing a half-depth student by copying teacher layers
===========================================================

"""

import numpy as np

from distillab.checkpoint import Checkpoint, continuous_init, layer_jump_init
from distillab.model import AcousticModel, PRESETS, init_params

# An 8-layer teacher with random weights stands in for a trained one; the
# surgery only moves tensors around, so the values do not matter here.
cfg = PRESETS["desk-teacher"]
teacher = Checkpoint.from_model(
    AcousticModel(cfg, params=init_params(cfg, np.random.default_rng(0))))
print("teacher layers:", teacher.config.n_layers)

# Jump initialization takes every second layer, so student layer i starts
# from teacher layer 2i and the teacher's final layer is reused.
student = layer_jump_init(teacher, 4)
print("jump mapping:", student.extra["init"]["mapping"])

# The copies are bit-exact, not approximate.
for s, t in student.extra["init"]["mapping"]:
    same = all(student.tensors[f"enc.{s}.{suf}"].tobytes()
               == teacher.tensors[f"enc.{t}.{suf}"].tobytes()
               for suf in ("attn.wq", "ffn.w1", "norm1.gamma"))
    print(f"student layer {s} == teacher layer {t}: {same}")

# The baseline takes the first d_s layers in order instead.
baseline = continuous_init(teacher, 4)
print("continuous mapping:", baseline.extra["init"]["mapping"])

# Everything outside the encoder stack (conv extractor, projection) is
# carried over unchanged in both modes.
shared = [k for k in student.tensors if not k.startswith("enc.")]
carried = all(np.array_equal(student.tensors[k], teacher.tensors[k])
              for k in shared)
print(f"{len(shared)} non-encoder tensors carried over unchanged: {carried}")
