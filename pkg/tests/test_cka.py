import numpy as np
import pytest

from distillab.checkpoint import Checkpoint, layer_jump_init
from distillab.cka import (
    CKAMatrix,
    export_heatmap,
    interlayer_matrix,
    linear_cka,
    read_heatmap_csv,
)
from distillab.errors import (
    ArgumentError,
    DegenerateInputError,
    FormatError,
    NumericError,
    ShapeError,
)
from distillab.model import AcousticModel, ModelConfig, init_params
from distillab.splice import Utterance, generate_synthetic_corpus, load_corpus

TOY = ModelConfig(conv_layers=((4, 10, 5), (4, 4, 4)), d_model=8, n_layers=4,
                  n_heads=2, ffn_dim=16)


def cka_gram_oracle(x, y):
    # Trace form over doubly centered Gram matrices; an independent route to
    # the same similarity as the feature-space Frobenius formula.
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    k = h @ (x @ x.T) @ h
    l = h @ (y @ y.T) @ h
    return float(np.trace(k @ l) / np.sqrt(np.trace(k @ k) * np.trace(l @ l)))


def toy_ckpt(seed=0, layers=4):
    cfg = TOY.with_layers(layers)
    return Checkpoint.from_model(
        AcousticModel(cfg, params=init_params(cfg, np.random.default_rng(seed))))


def noise_probe(n=3, seed=7, samples=3000):
    rng = np.random.default_rng(seed)
    return [Utterance(f"p{i}", 0.1 * rng.standard_normal(samples))
            for i in range(n)]


# --- linear_cka ---


def test_linear_cka_self_similarity():
    x = np.random.default_rng(0).standard_normal((30, 6))
    assert abs(linear_cka(x, x) - 1.0) < 1e-6


def test_linear_cka_orthogonal_and_scaling_invariance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((25, 5))
    y = rng.standard_normal((25, 4))
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    assert abs(linear_cka(x, x @ q) - 1.0) < 1e-6
    assert abs(linear_cka(x, 3.7 * x) - 1.0) < 1e-6
    base = linear_cka(x, y)
    assert abs(linear_cka(x @ q, y) - base) < 1e-6
    assert abs(linear_cka(x, 0.02 * y) - base) < 1e-6


def test_linear_cka_matches_gram_oracle():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((20, 5))
        y = rng.standard_normal((20, 7))
        assert linear_cka(x, y) == pytest.approx(cka_gram_oracle(x, y), abs=1e-10)


def test_linear_cka_symmetric():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((40, 6))
    y = rng.standard_normal((40, 9))
    assert abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-10


def test_linear_cka_bounded():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(2, 50))
        x = rng.standard_normal((n, int(rng.integers(1, 8))))
        w = rng.standard_normal((x.shape[1], int(rng.integers(1, 8))))
        y = x @ w + 0.1 * rng.standard_normal((n, w.shape[1]))
        v = linear_cka(x, y)
        assert 0.0 <= v <= 1.0 + 1e-9


def test_linear_cka_degenerate_inputs():
    x = np.random.default_rng(5).standard_normal((10, 3))
    with pytest.raises(DegenerateInputError):
        linear_cka(np.zeros((10, 3)), x)
    with pytest.raises(DegenerateInputError):
        linear_cka(x, np.full((10, 2), 0.5))  # constant rows center to zero
    with pytest.raises(DegenerateInputError):
        linear_cka(x[:1], x[:1])


def test_linear_cka_shape_and_nan_errors():
    x = np.random.default_rng(6).standard_normal((10, 3))
    with pytest.raises(ShapeError):
        linear_cka(x, x[:8])
    with pytest.raises(ShapeError):
        linear_cka(x[:, 0], x[:, 0])
    bad = x.copy()
    bad[2, 1] = np.nan
    with pytest.raises(NumericError):
        linear_cka(x, bad)


# --- interlayer_matrix ---


def test_interlayer_same_model_unit_diagonal_symmetric():
    ckpt = toy_ckpt(seed=0)
    m = interlayer_matrix(ckpt, ckpt, noise_probe())
    assert m.values.shape == (5, 5)
    assert m.row_layers == (0, 1, 2, 3, 4)
    assert m.col_layers == (0, 1, 2, 3, 4)
    assert np.allclose(np.diag(m.values), 1.0, atol=1e-6)
    assert np.allclose(m.values, m.values.T, atol=1e-6)
    assert m.values.min() >= 0.0 and m.values.max() <= 1.0 + 1e-9


def test_interlayer_identity_layers_collapse_columns():
    ckpt = toy_ckpt(seed=1)
    frozen = Checkpoint(config=ckpt.config,
                        tensors={k: v.copy() for k, v in ckpt.tensors.items()},
                        extra=dict(ckpt.extra))
    # zero every residual branch output so each layer emits its input
    for layer in range(1, 5):
        for name in (f"enc.{layer}.attn.wo", f"enc.{layer}.attn.bo",
                     f"enc.{layer}.ffn.w2", f"enc.{layer}.ffn.b2"):
            frozen.tensors[name][:] = 0.0
    m = interlayer_matrix(toy_ckpt(seed=2), frozen, noise_probe())
    # every column-model state equals its input state, so columns agree
    assert np.allclose(m.values, m.values[:, :1], atol=1e-12)


def test_interlayer_jump_student_prefers_source_layer(tmp_path):
    # Pinned-seed regression fixture. At random initialization the margin
    # between a student layer's source teacher layer and the one before it
    # is small and seed-dependent; these seeds give a clear positive margin.
    generate_synthetic_corpus({"n_utts": 5, "syllable_inventory_size": 8,
                               "syllables_per_utt_range": (2, 4),
                               "syllable_ms_range": (60, 120), "seed": 12},
                              tmp_path)
    probe = load_corpus(tmp_path).utterances
    teacher = toy_ckpt(seed=17, layers=8)
    student = layer_jump_init(teacher, 4)
    m = interlayer_matrix(student, teacher, probe)
    assert m.values.shape == (5, 9)
    for i in range(1, 5):
        assert m.values[i, 2 * i] >= m.values[i, 2 * i - 1]


def test_interlayer_subsampling_is_deterministic_and_paired():
    ckpt = toy_ckpt(seed=3)
    probe = noise_probe(n=4, seed=9, samples=2600)
    a = interlayer_matrix(ckpt, ckpt, probe, max_frames=128, seed=5)
    b = interlayer_matrix(ckpt, ckpt, probe, max_frames=128, seed=5)
    assert np.array_equal(a.values, b.values)
    # paired row selection keeps the self-similarity diagonal exact
    assert np.allclose(np.diag(a.values), 1.0, atol=1e-6)
    c = interlayer_matrix(ckpt, ckpt, probe, max_frames=130, seed=5)
    assert not np.array_equal(a.values, c.values)


def test_interlayer_argument_errors():
    ckpt = toy_ckpt(seed=0)
    with pytest.raises(ArgumentError):
        interlayer_matrix(ckpt, ckpt, [])
    with pytest.raises(ArgumentError):
        interlayer_matrix(ckpt, ckpt, noise_probe(), max_frames=1)


# --- heatmap export ---


def test_export_heatmap_csv_roundtrip(tmp_path):
    values = np.array([[1.0, 0.1234567, 0.5],
                       [0.0, 0.999999, 0.25]])
    m = CKAMatrix(values, (0, 1), (0, 1, 2))
    export_heatmap(m, tmp_path / "m.csv", tmp_path / "m.pgm")
    back = read_heatmap_csv(tmp_path / "m.csv")
    assert back.row_layers == (0, 1)
    assert back.col_layers == (0, 1, 2)
    assert np.allclose(back.values, values, atol=5e-7)


def test_export_heatmap_pgm_pixels(tmp_path):
    values = np.array([[0.5, 1.0, 0.0],
                       [-0.2, 1.2, 0.25]])
    export_heatmap(CKAMatrix(values, (0, 1), (0, 1, 2)),
                   tmp_path / "m.csv", tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    pixels = np.frombuffer(raw[len(b"P5\n3 2\n255\n"):], dtype=np.uint8)
    assert pixels.tolist() == [128, 255, 0, 0, 255, 64]


def test_export_heatmap_single_cell(tmp_path):
    export_heatmap(CKAMatrix(np.array([[1.0]]), (0,), (0,)),
                   tmp_path / "one.csv", tmp_path / "one.pgm")
    raw = (tmp_path / "one.pgm").read_bytes()
    assert raw == b"P5\n1 1\n255\n\xff"


def test_read_heatmap_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1\n0,0.5\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_heatmap_csv(bad)
    bad.write_text("layer,0,1\n0,0.5,oops\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_heatmap_csv(bad)
