"""Checkpoint serialization (manifest + raw blob) and the two student
initialization strategies: layer-jumping and the continuous baseline.

On disk a checkpoint is a directory holding `manifest.json` and
`params.bin`. The manifest carries the model config, one entry per tensor
({name, shape, dtype, offset, length} into the blob), and optional extras
(init provenance, CTC vocab). The blob is raw little-endian IEEE-754.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DepthError, FormatError
from .model import AcousticModel, ModelConfig
from .tensor import Tensor

_DTYPE_TO_NP = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAME_RE = re.compile(
    r"^(conv\.\d+\.|proj\.|enc\.[1-9]\d*\.|final_norm\.)\w[\w.]*$|^head\.(weight|bias)$|^mask_emb$"
)

LayerMapping = list[tuple[int, int]]  # (student_layer, teacher_layer), 1-indexed


def validate_mapping(mapping: LayerMapping, d_s: int, d_t: int) -> None:
    students = [s for s, _ in mapping]
    if sorted(students) != list(range(1, d_s + 1)):
        raise ArgumentError(f"student layers must be exactly 1..{d_s}, got {students}")
    for s, t in mapping:
        if not 1 <= t <= d_t:
            raise ArgumentError(f"teacher layer {t} out of range 1..{d_t} (pair ({s},{t}))")


@dataclass
class Checkpoint:
    """In-memory checkpoint: named tensors plus the embedded model config."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: AcousticModel, extra: dict | None = None) -> "Checkpoint":
        tensors = {name: p.data.copy() for name, p in model.params.items()}
        return cls(model.config, tensors, dict(extra or {}))

    def to_model(self) -> AcousticModel:
        params = {name: Tensor(arr.copy(), requires_grad=True)
                  for name, arr in self.tensors.items()
                  if not (name.startswith("head.") or name == "mask_emb")}
        return AcousticModel(self.config, params=params)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers


def save_checkpoint(ckpt: Checkpoint | AcousticModel, path) -> None:
    """Write manifest.json + params.bin; save/load round-trips bit-exactly."""
    if isinstance(ckpt, AcousticModel):
        ckpt = Checkpoint.from_model(ckpt)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        dtype = "f64" if arr.dtype == np.float64 else "f32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TO_NP[dtype]).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
            "length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {"config": ckpt.config.to_dict(), "tensors": entries}
    manifest.update(ckpt.extra)
    (path / "params.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    """Validate manifest invariants, then materialize tensors from the blob."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"no manifest.json under {path}")
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest.json is not valid JSON: {e}")
    blob = (path / "params.bin").read_bytes()
    if "config" not in manifest or "tensors" not in manifest:
        raise FormatError("manifest missing 'config' or 'tensors'")
    config = ModelConfig.from_dict(manifest["config"])

    entries = manifest["tensors"]
    seen = set()
    for e in entries:
        name = e.get("name", "<unnamed>")
        if not _NAME_RE.match(name):
            raise FormatError(f"entry {name!r}: name outside the canonical scheme")
        if name in seen:
            raise FormatError(f"entry {name!r}: duplicate tensor name")
        seen.add(name)
        if e["dtype"] not in _DTYPE_TO_NP:
            raise FormatError(f"entry {name!r}: unknown dtype {e['dtype']!r}")
        width = _DTYPE_TO_NP[e["dtype"]].itemsize
        expected = int(np.prod(e["shape"], dtype=np.int64)) * width
        if e["length"] != expected:
            raise FormatError(
                f"entry {name!r}: length {e['length']} != shape product x dtype width {expected}")
        if e["offset"] < 0:
            raise FormatError(f"entry {name!r}: negative offset")

    spans = sorted(entries, key=lambda e: e["offset"])
    cursor = 0
    for e in spans:
        if e["offset"] < cursor:
            raise FormatError(f"entry {e['name']!r}: span overlaps the previous entry")
        if e["offset"] > cursor:
            raise FormatError(f"entry {e['name']!r}: gap before span (spans must cover the blob)")
        cursor = e["offset"] + e["length"]
    if cursor != len(blob):
        raise FormatError(f"blob has {len(blob)} bytes but manifest covers {cursor}")

    tensors = {}
    for e in entries:
        dt = _DTYPE_TO_NP[e["dtype"]]
        arr = np.frombuffer(blob, dtype=dt, count=e["length"] // dt.itemsize,
                            offset=e["offset"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
    extra = {k: v for k, v in manifest.items() if k not in ("config", "tensors")}
    return Checkpoint(config, tensors, extra)


def load_model(path) -> AcousticModel:
    return load_checkpoint(path).to_model()


# ---------------------------------------------------------------------------
# initialization surgery


def _student_from(teacher: Checkpoint, mapping: LayerMapping, mode: str) -> Checkpoint:
    d_s = len(mapping)
    tensors: dict[str, np.ndarray] = {}
    for name, arr in teacher.tensors.items():
        if name.startswith("enc.") or name.startswith("head.") or name == "mask_emb":
            continue
        tensors[name] = arr.copy()
    suffixes = sorted({name.split(".", 2)[2] for name in teacher.tensors if name.startswith("enc.")})
    for s, t in mapping:
        for suffix in suffixes:
            tensors[f"enc.{s}.{suffix}"] = teacher.tensors[f"enc.{t}.{suffix}"].copy()
    config = teacher.config.with_layers(d_s)
    extra = {"init": {"mode": mode, "mapping": [list(p) for p in mapping]}}
    return Checkpoint(config, tensors, extra)


def jump_mapping(d_s: int) -> LayerMapping:
    return [(i, 2 * i) for i in range(1, d_s + 1)]


def continuous_mapping(d_s: int) -> LayerMapping:
    return [(i, i) for i in range(1, d_s + 1)]


def layer_jump_init(teacher: Checkpoint, d_s: int) -> Checkpoint:
    """Student layer i <- teacher layer 2i, so the teacher's deepest layers
    (including the final one when d_t = 2*d_s) are reused verbatim."""
    d_t = teacher.config.n_layers
    if d_t < 2 * d_s:
        raise DepthError(f"layer-jump init needs teacher depth >= 2x student: teacher {d_t}, student {d_s}")
    mapping = jump_mapping(d_s)
    validate_mapping(mapping, d_s, d_t)
    return _student_from(teacher, mapping, "jump")


def continuous_init(teacher: Checkpoint, d_s: int) -> Checkpoint:
    """Baseline: student layer i <- teacher layer i (the first d_s layers)."""
    d_t = teacher.config.n_layers
    if d_t < d_s:
        raise DepthError(f"continuous init needs teacher depth >= student: teacher {d_t}, student {d_s}")
    mapping = continuous_mapping(d_s)
    validate_mapping(mapping, d_s, d_t)
    return _student_from(teacher, mapping, "continuous")
