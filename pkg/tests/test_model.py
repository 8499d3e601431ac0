import numpy as np
import pytest

from distillab import tensor as T
from distillab.errors import InputTooShortError
from distillab.model import (
    PRESETS,
    AcousticModel,
    ModelConfig,
    init_params,
    min_samples,
    num_frames,
    param_count,
    param_shapes,
)
from distillab.optim import grad_check
from distillab.tensor import Tensor


TOY = ModelConfig(conv_layers=((4, 3, 2),), d_model=8, n_layers=2, n_heads=2, ffn_dim=8, dtype="f64")


def toy_model(seed=0, config=TOY):
    return AcousticModel(config, rng=np.random.default_rng(seed))


def test_desk_preset_frame_formula():
    # 16000 -> 3199 -> 798 -> 398 -> 198 through the desk conv stack
    assert num_frames(PRESETS["desk-teacher"], 16000) == 198


def test_one_receptive_field_gives_one_frame():
    cfg = PRESETS["desk-teacher"]
    n = min_samples(cfg)
    assert num_frames(cfg, n) == 1
    model = AcousticModel(cfg, rng=np.random.default_rng(1))
    assert model.forward_features(np.zeros(n, dtype=np.float32)).shape[0] == 1


def test_forward_features_deterministic():
    model = toy_model()
    wav = np.random.default_rng(3).standard_normal(40)
    a = model.forward_features(wav)
    b = model.forward_features(wav)
    assert a.data.tobytes() == b.data.tobytes()


def test_too_short_waveform_raises():
    model = toy_model()
    with pytest.raises(InputTooShortError):
        model.forward_features(np.zeros(2))


def test_full_layerdrop_passes_input_through():
    cfg = ModelConfig(((4, 3, 2),), d_model=8, n_layers=3, n_heads=2, ffn_dim=8, layerdrop_p=1.0)
    model = AcousticModel(cfg, rng=np.random.default_rng(4))
    frames = model.forward_features(np.random.default_rng(5).standard_normal(30))
    hidden = model.forward_encoder(frames, mode="train", rng=np.random.default_rng(6))
    assert np.array_equal(hidden[3].data, hidden[0].data)


def test_zero_layerdrop_train_equals_eval():
    model = toy_model(seed=7)
    frames = model.forward_features(np.random.default_rng(8).standard_normal(33))
    train = model.forward_encoder(frames, mode="train", rng=np.random.default_rng(9))
    eval_ = model.forward_encoder(frames, mode="eval")
    for a, b in zip(train.states, eval_.states):
        assert np.array_equal(a.data, b.data)


def test_state_count_is_layers_plus_one():
    cfg = ModelConfig(((4, 3, 2),), d_model=8, n_layers=4, n_heads=2, ffn_dim=8)
    model = AcousticModel(cfg, rng=np.random.default_rng(10))
    hidden = model.forward(np.zeros(20, dtype=np.float32))
    assert len(hidden) == 5
    assert hidden.n_layers == 4


def test_all_states_share_shape():
    model = toy_model(seed=11)
    hidden = model.forward(np.random.default_rng(12).standard_normal(41))
    t = hidden[0].shape[0]
    for s in hidden.states:
        assert s.shape == (t, TOY.d_model)


def test_param_count_zero_layers():
    cfg = ModelConfig(((4, 3, 2),), d_model=8, n_layers=0, n_heads=2, ffn_dim=8)
    assert param_count(cfg)["encoder"] == 0


def test_param_count_doubles_with_depth():
    base = ModelConfig(((4, 3, 2),), d_model=8, n_layers=3, n_heads=2, ffn_dim=8)
    double = base.with_layers(6)
    assert param_count(double)["encoder"] == 2 * param_count(base)["encoder"]
    assert param_count(double)["conv"] == param_count(base)["conv"]


def test_desk_student_encoder_is_half_of_teacher():
    teacher = param_count(PRESETS["desk-teacher"])
    student = param_count(PRESETS["desk-student"])
    assert student["encoder"] * 2 == teacher["encoder"]


def test_repeat_forward_bit_identical():
    model = toy_model(seed=13)
    wav = np.random.default_rng(14).standard_normal(37)
    h1 = model.forward(wav)
    h2 = model.forward(wav)
    for a, b in zip(h1.states, h2.states):
        assert a.data.tobytes() == b.data.tobytes()


def test_same_seed_same_init():
    a = init_params(TOY, np.random.default_rng(15))
    b = init_params(TOY, np.random.default_rng(15))
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_padded_frames_do_not_influence_unpadded():
    model = toy_model(seed=16)
    rng = np.random.default_rng(17)
    frames = Tensor(rng.standard_normal((6, 4)), dtype="f64")
    garbage = rng.standard_normal((3, 4)) * 50.0
    mask = np.array([False] * 6 + [True] * 3)

    pad_zero = Tensor(np.concatenate([frames.data, np.zeros((3, 4))], axis=0), dtype="f64")
    pad_junk = Tensor(np.concatenate([frames.data, garbage], axis=0), dtype="f64")

    # padded content is invisible: swapping it changes nothing, bit for bit
    a = model.forward_encoder(pad_zero, mode="eval", frame_mask=mask)
    b = model.forward_encoder(pad_junk, mode="eval", frame_mask=mask)
    for sa, sb in zip(a.states, b.states):
        assert np.array_equal(sa.data[:6], sb.data[:6])

    # and the unpadded positions agree with the mask-free forward
    clean = model.forward_encoder(frames, mode="eval")
    for sc, sb in zip(clean.states, b.states):
        assert np.abs(sc.data - sb.data[:6]).max() < 1e-9


def test_layerdrop_pattern_reproducible():
    cfg = ModelConfig(((4, 3, 2),), d_model=8, n_layers=6, n_heads=2, ffn_dim=8, layerdrop_p=0.5)
    model = AcousticModel(cfg, rng=np.random.default_rng(18))
    frames = model.forward_features(np.random.default_rng(19).standard_normal(25))
    h1 = model.forward_encoder(frames, mode="train", rng=np.random.default_rng(20))
    h2 = model.forward_encoder(frames, mode="train", rng=np.random.default_rng(20))
    for a, b in zip(h1.states, h2.states):
        assert a.data.tobytes() == b.data.tobytes()


def test_param_shapes_cover_canonical_names():
    shapes = param_shapes(TOY)
    assert "conv.0.weight" in shapes
    assert "proj.weight" in shapes
    assert "enc.1.attn.wq" in shapes and "enc.2.ffn.w2" in shapes
    assert "final_norm.gamma" in shapes
    assert not any(name.startswith("enc.0.") for name in shapes)  # 1-indexed


def test_toy_forward_loss_gradcheck():
    model = toy_model(seed=21)
    wav = np.random.default_rng(22).standard_normal(17)  # T = 8
    target = np.random.default_rng(23).standard_normal((8, 8))

    def f(params):
        hidden = model.forward(wav)
        diff = hidden[-1] - Tensor(target, dtype="f64")
        return T.tmean(diff * diff)

    assert grad_check(f, model.parameters(), eps=1e-5) < 1e-3
