"""wav2vec2-shaped acoustic model: strided conv feature extractor feeding a
pre-norm transformer encoder that captures every layer's hidden state.

Both teacher and student are instances of this model at different depths.
A `FrameMask` is a boolean vector over frames with True marking padded
positions; masked keys receive a large negative attention bias so padded
frames cannot influence unpadded ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ArgumentError, InputTooShortError, ShapeError
from .tensor import Tensor

FrameMask = np.ndarray  # bool per frame, True = padded

_ATTN_MASK_BIAS = -1e9  # underflows to exactly 0 after softmax shift


@dataclass(frozen=True)
class ModelConfig:
    conv_layers: tuple[tuple[int, int, int], ...]  # (channels, kernel, stride)
    d_model: int
    n_layers: int
    n_heads: int
    ffn_dim: int
    layerdrop_p: float = 0.0
    dtype: str = "f32"

    def __post_init__(self):
        if not self.conv_layers:
            raise ArgumentError("conv_layers must be non-empty")
        if any(s < 1 for _, _, s in self.conv_layers):
            raise ArgumentError("all conv strides must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ArgumentError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.layerdrop_p <= 1.0:
            raise ArgumentError(f"layerdrop_p must be in [0,1], got {self.layerdrop_p}")
        if self.dtype not in ("f32", "f64"):
            raise ArgumentError(f"dtype must be f32 or f64, got {self.dtype!r}")
        object.__setattr__(self, "conv_layers", tuple(tuple(c) for c in self.conv_layers))

    def with_layers(self, n_layers: int) -> "ModelConfig":
        return replace(self, n_layers=n_layers)

    def to_dict(self) -> dict:
        return {
            "conv_layers": [list(c) for c in self.conv_layers],
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "layerdrop_p": self.layerdrop_p,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            conv_layers=tuple(tuple(c) for c in d["conv_layers"]),
            d_model=int(d["d_model"]),
            n_layers=int(d["n_layers"]),
            n_heads=int(d["n_heads"]),
            ffn_dim=int(d["ffn_dim"]),
            layerdrop_p=float(d.get("layerdrop_p", 0.0)),
            dtype=d.get("dtype", "f32"),
        )


_DESK_CONV = ((64, 10, 5), (64, 8, 4), (64, 4, 2), (64, 4, 2))
_W2V_CONV = ((512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2), (512, 3, 2), (512, 2, 2))

PRESETS: dict[str, ModelConfig] = {
    # 6 conv layers / 24 encoder layers, and its half-depth counterpart
    "xlsr53-shape": ModelConfig(_W2V_CONV, d_model=1024, n_layers=24, n_heads=16, ffn_dim=4096),
    "distil-shape": ModelConfig(_W2V_CONV, d_model=1024, n_layers=12, n_heads=16, ffn_dim=4096),
    # laptop-cost shapes that keep the "half the depth, same width" geometry
    "desk-teacher": ModelConfig(_DESK_CONV, d_model=64, n_layers=8, n_heads=4, ffn_dim=256),
    "desk-student": ModelConfig(_DESK_CONV, d_model=64, n_layers=4, n_heads=4, ffn_dim=256),
}


@dataclass
class HiddenStates:
    """Per-layer encoder activations: states[0] is the encoder input
    (post-projection + positional encoding), states[l] the output of
    transformer layer l, 1-indexed. All entries are [T, d_model]."""

    states: list[Tensor] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.states) - 1

    def __getitem__(self, i: int) -> Tensor:
        return self.states[i]

    def __len__(self) -> int:
        return len(self.states)


# ---------------------------------------------------------------------------
# shape bookkeeping


def num_frames(config: ModelConfig, n_samples: int) -> int:
    """Frame count after the composed valid-conv stack; raises if too short."""
    t = n_samples
    for _, k, s in config.conv_layers:
        if t < k:
            raise InputTooShortError(
                f"waveform of {n_samples} samples is shorter than the receptive field "
                f"({min_samples(config)} samples)")
        t = (t - k) // s + 1
    return t


def min_samples(config: ModelConfig) -> int:
    """Smallest waveform length that yields one output frame."""
    t = 1
    for _, k, s in reversed(config.conv_layers):
        t = (t - 1) * s + k
    return t


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor-name -> shape map; the single source of truth for
    init, counting, and checkpoint layout. Encoder layers are 1-indexed."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, (c_out, k, _) in enumerate(config.conv_layers):
        shapes[f"conv.{i}.weight"] = (c_out, c_in, k)
        shapes[f"conv.{i}.bias"] = (c_out,)
        c_in = c_out
    d = config.d_model
    shapes["proj.norm.gamma"] = (c_in,)
    shapes["proj.norm.beta"] = (c_in,)
    shapes["proj.weight"] = (c_in, d)
    shapes["proj.bias"] = (d,)
    for l in range(1, config.n_layers + 1):
        p = f"enc.{l}"
        shapes[f"{p}.norm1.gamma"] = (d,)
        shapes[f"{p}.norm1.beta"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{name}"] = (d,)
        shapes[f"{p}.norm2.gamma"] = (d,)
        shapes[f"{p}.norm2.beta"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, config.ffn_dim)
        shapes[f"{p}.ffn.b1"] = (config.ffn_dim,)
        shapes[f"{p}.ffn.w2"] = (config.ffn_dim, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["final_norm.gamma"] = (d,)
    shapes["final_norm.beta"] = (d,)
    return shapes


def param_count(config: ModelConfig) -> dict[str, int]:
    """Exact trainable-parameter counts, broken down by component."""
    counts = {"conv": 0, "encoder": 0, "other": 0}
    for name, shape in param_shapes(config).items():
        n = int(np.prod(shape))
        if name.startswith("conv."):
            counts["conv"] += n
        elif name.startswith("enc."):
            counts["encoder"] += n
        else:
            counts["other"] += n
    counts["total"] = counts["conv"] + counts["encoder"] + counts["other"]
    return counts


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters: norm gamma=1/beta=0, biases 0, weights scaled normal.

    Draw order follows param_shapes insertion order, so a fixed seed gives
    bit-identical parameters.
    """
    np_dtype = np.float64 if config.dtype == "f64" else np.float32
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf in ("beta",) or leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1])) if name.startswith("conv.") else shape[0]
            data = rng.standard_normal(shape) / math.sqrt(fan_in)
        params[name] = Tensor(data.astype(np_dtype), requires_grad=True)
    return params


def sinusoidal_positions(t: int, d: int, np_dtype) -> np.ndarray:
    """Fixed absolute positional encoding; parameter-free by design so layer
    surgery has nothing positional to copy."""
    pos = np.arange(t, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)
    angles = pos * np.exp(-math.log(10000.0) * idx / d)
    pe = np.zeros((t, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d // 2])
    return pe.astype(np_dtype)


class AcousticModel:
    """Conv feature extractor + transformer encoder over a named param dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        if params is None:
            params = init_params(config, rng if rng is not None else np.random.default_rng(0))
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in params:
                raise ShapeError(f"missing parameter {name}")
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {params[name].shape}")
        self.params = {name: params[name] for name in expected}  # canonical order

    @property
    def np_dtype(self):
        return np.float64 if self.config.dtype == "f64" else np.float32

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- feature extractor ---------------------------------------------------

    def forward_features(self, waveform) -> Tensor:
        """Waveform [N] -> conv features [T, c]; deterministic."""
        wav = waveform.data if isinstance(waveform, Tensor) else np.asarray(waveform)
        x = Tensor(wav.astype(self.np_dtype, copy=False).reshape(-1, 1))
        if x.shape[0] < min_samples(self.config):
            raise InputTooShortError(
                f"waveform of {x.shape[0]} samples is shorter than the receptive field "
                f"({min_samples(self.config)} samples)")
        for i, (_, _, stride) in enumerate(self.config.conv_layers):
            x = T.conv1d(x, self._p(f"conv.{i}.weight"), stride=stride)
            x = T.gelu(x + self._p(f"conv.{i}.bias"))
        return x

    # -- encoder --------------------------------------------------------------

    def _attention(self, x: Tensor, layer: int, frame_mask: FrameMask | None) -> Tensor:
        p = f"enc.{layer}.attn"
        t, d = x.shape
        h = self.config.n_heads
        dh = d // h
        q = T.matmul(x, self._p(f"{p}.wq")) + self._p(f"{p}.bq")
        k = T.matmul(x, self._p(f"{p}.wk")) + self._p(f"{p}.bk")
        v = T.matmul(x, self._p(f"{p}.wv")) + self._p(f"{p}.bv")
        q = T.transpose(T.reshape(q, (t, h, dh)), (1, 0, 2))  # [h, t, dh]
        k = T.transpose(T.reshape(k, (t, h, dh)), (1, 2, 0))  # [h, dh, t]
        v = T.transpose(T.reshape(v, (t, h, dh)), (1, 0, 2))
        scores = T.matmul(q, k) * (1.0 / math.sqrt(dh))  # [h, t, t]
        if frame_mask is not None:
            bias = np.where(frame_mask, _ATTN_MASK_BIAS, 0.0).astype(self.np_dtype)
            scores = scores + Tensor(bias)  # broadcast over heads and queries
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)  # [h, t, dh]
        ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (t, d))
        return T.matmul(ctx, self._p(f"{p}.wo")) + self._p(f"{p}.bo")

    def _ffn(self, x: Tensor, layer: int) -> Tensor:
        p = f"enc.{layer}.ffn"
        h = T.gelu(T.matmul(x, self._p(f"{p}.w1")) + self._p(f"{p}.b1"))
        return T.matmul(h, self._p(f"{p}.w2")) + self._p(f"{p}.b2")

    def forward_encoder(self, frames: Tensor, mode: str = "eval",
                        rng: np.random.Generator | None = None,
                        frame_mask: FrameMask | None = None) -> HiddenStates:
        """Frames [T, c] -> n_layers+1 hidden states of [T, d_model].

        In train mode each layer is independently skipped with probability
        layerdrop_p (the skipped layer emits its input unchanged); eval mode
        never drops. One rng draw per layer is consumed whenever layerdrop
        is active, so fixed seeds reproduce drop patterns exactly.
        """
        if mode not in ("train", "eval"):
            raise ArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
        if frame_mask is not None and len(frame_mask) != frames.shape[0]:
            raise ShapeError(f"frame_mask length {len(frame_mask)} != T {frames.shape[0]}")
        drop_p = self.config.layerdrop_p if mode == "train" else 0.0
        if drop_p > 0.0 and rng is None:
            raise ArgumentError("layerdrop requires an rng in train mode")
        x = T.layer_norm(frames, self._p("proj.norm.gamma"), self._p("proj.norm.beta"))
        x = T.matmul(x, self._p("proj.weight")) + self._p("proj.bias")
        t = x.shape[0]
        x = x + Tensor(sinusoidal_positions(t, self.config.d_model, self.np_dtype))
        hidden = HiddenStates([x])
        for layer in range(1, self.config.n_layers + 1):
            if drop_p > 0.0 and rng.random() < drop_p:
                hidden.states.append(hidden.states[-1])
                continue
            x = hidden.states[-1]
            a = T.layer_norm(x, self._p(f"enc.{layer}.norm1.gamma"), self._p(f"enc.{layer}.norm1.beta"))
            x = x + self._attention(a, layer, frame_mask)
            f = T.layer_norm(x, self._p(f"enc.{layer}.norm2.gamma"), self._p(f"enc.{layer}.norm2.beta"))
            x = x + self._ffn(f, layer)
            hidden.states.append(x)
        return hidden

    def forward(self, waveform, mode: str = "eval",
                rng: np.random.Generator | None = None) -> HiddenStates:
        return self.forward_encoder(self.forward_features(waveform), mode=mode, rng=rng)

    def encode_normed(self, waveform, mode: str = "eval",
                      rng: np.random.Generator | None = None,
                      features: Tensor | None = None) -> Tensor:
        """Final-norm output of the last layer, the input to downstream heads."""
        frames = self.forward_features(waveform) if features is None else features
        hidden = self.forward_encoder(frames, mode=mode, rng=rng)
        return T.layer_norm(hidden[-1], self._p("final_norm.gamma"), self._p("final_norm.beta"))
