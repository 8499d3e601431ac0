"""Centered kernel alignment between encoder layers.

Collects per-layer hidden states of two models over a shared probe set and
scores every layer pair with linear CKA, the inner-product similarity that
ignores rotations and rescalings of either representation. The resulting
matrix shows which student layers track which teacher layers.
"""

import csv

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .errors import (ArgumentError, DegenerateInputError, FormatError,
                     NumericError, ShapeError)
from .splice import Utterance
from .tensor import no_grad

__all__ = [
    "CKAMatrix",
    "export_heatmap",
    "interlayer_matrix",
    "linear_cka",
    "read_heatmap_csv",
]


def linear_cka(x, y) -> float:
    """Similarity of two activation matrices over the same rows.

    Columns are mean-centered, then

        ||Yc' Xc||_F^2 / (||Xc' Xc||_F * ||Yc' Yc||_F)

    which lands in [0, 1], is symmetric in its arguments, and is invariant
    to orthogonal transforms and isotropic scaling of either matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(
            f"activation matrices must be 2-D, got {x.ndim}-D and {y.ndim}-D")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        # a single row always centers to zero
        raise DegenerateInputError(f"need at least 2 rows, got {x.shape[0]}")
    if np.isnan(x).any() or np.isnan(y).any():
        raise NumericError("linear_cka: NaN in activations")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    x_norm = float(np.linalg.norm(xc.T @ xc))
    y_norm = float(np.linalg.norm(yc.T @ yc))
    if x_norm == 0.0:
        raise DegenerateInputError("first matrix is zero after centering")
    if y_norm == 0.0:
        raise DegenerateInputError("second matrix is zero after centering")
    value = float(np.linalg.norm(yc.T @ xc) ** 2 / (x_norm * y_norm))
    # Cauchy-Schwarz bounds the true value to [0,1]; trim float spill only.
    return min(max(value, 0.0), 1.0)


@dataclass
class CKAMatrix:
    """values[i, j] = linear CKA of row-model state i vs column-model state j.

    State indices follow the encoder convention: 0 is the pre-encoder input,
    l the output of transformer layer l.
    """

    values: np.ndarray
    row_layers: tuple[int, ...]
    col_layers: tuple[int, ...]


def _collect(model, probe: Sequence[Utterance]) -> list[np.ndarray]:
    """Eval-mode hidden states per layer, concatenated over the probe set."""
    per_layer = None
    with no_grad():
        for utt in probe:
            hidden = model.forward(utt.samples, mode="eval")
            if per_layer is None:
                per_layer = [[] for _ in hidden.states]
            for i, state in enumerate(hidden.states):
                per_layer[i].append(np.asarray(state.data, dtype=np.float64))
    return [np.concatenate(chunks, axis=0) for chunks in per_layer]


def interlayer_matrix(model_a: Checkpoint, model_b: Checkpoint,
                      probe: Sequence[Utterance], max_frames: int = 4096,
                      seed: int = 0) -> CKAMatrix:
    """CKA between every layer pair of two models over one probe set.

    Both models run in eval mode over every probe utterance; each layer's
    frames are concatenated into one activation matrix. When the probe set
    exceeds `max_frames` frames, one row subset is sampled uniformly without
    replacement and applied to both models, so entries stay frame-paired.
    """
    if len(probe) == 0:
        raise ArgumentError("probe set is empty")
    if max_frames < 2:
        raise ArgumentError(f"max_frames must be at least 2, got {max_frames}")
    acts_a = _collect(model_a.to_model(), probe)
    acts_b = _collect(model_b.to_model(), probe)
    n = acts_a[0].shape[0]
    if n != acts_b[0].shape[0]:
        raise ShapeError(
            f"models produce {n} vs {acts_b[0].shape[0]} probe frames; "
            "layer pairing needs identical frame counts")
    if n > max_frames:
        rng = np.random.default_rng([seed, 7])
        keep = np.sort(rng.choice(n, size=max_frames, replace=False))
        acts_a = [m[keep] for m in acts_a]
        acts_b = [m[keep] for m in acts_b]
    values = np.zeros((len(acts_a), len(acts_b)), dtype=np.float64)
    for i, a in enumerate(acts_a):
        for j, b in enumerate(acts_b):
            values[i, j] = linear_cka(a, b)
    return CKAMatrix(values, tuple(range(len(acts_a))),
                     tuple(range(len(acts_b))))


def export_heatmap(m: CKAMatrix, path_csv, path_pgm) -> None:
    """Write a matrix as labeled 6-decimal CSV and as a binary (P5) PGM.

    PGM pixels are round-half-up of 255 * clamp(value, 0, 1); row i of the
    image is row-model state i, matching the CSV row order.
    """
    with open(path_csv, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer", *m.col_layers])
        for label, row in zip(m.row_layers, m.values):
            w.writerow([label, *(f"{v:.6f}" for v in row)])
    pixels = np.floor(255.0 * np.clip(m.values, 0.0, 1.0) + 0.5).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path_pgm, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_heatmap_csv(path) -> CKAMatrix:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or not rows[0] or rows[0][0] != "layer":
        raise FormatError(f"{path}: missing 'layer' header row")
    try:
        col_layers = tuple(int(c) for c in rows[0][1:])
        row_layers = tuple(int(r[0]) for r in rows[1:])
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]],
                          dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed heatmap row ({exc})") from None
    if values.size and values.shape[1] != len(col_layers):
        raise FormatError(f"{path}: ragged rows")
    return CKAMatrix(values, row_layers, col_layers)
