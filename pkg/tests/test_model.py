from pathlib import Path

import numpy as np
import pytest

from chunkcast.chunking import ChunkLayout, build_sparse_mask
from chunkcast.errors import ConditioningError, ConfigError, DimensionError
from chunkcast.model import (Conditioning, DiT, Mode, ModelConfig, init_params, param_count, param_shapes,
                             window_indices)
from chunkcast.numerics import Tensor
from chunkcast.numerics.serialize import load_tensor

from conftest import random_cond, randomize, tiny_config

GOLDEN = Path(__file__).parent / "golden"


def golden_inputs():
    cfg = tiny_config()
    rng = np.random.default_rng(2024)
    x = rng.standard_normal((1, 6, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 1, 6, 2, modes=[[1, 1, 0, 1, 0, 1]])
    return cfg, x, cond


def frame_diagonal_mask(frames: int, tokens: int) -> np.ndarray:
    return np.kron(np.eye(frames, dtype=bool), np.ones((tokens, tokens), bool))


# ---- golden pins -------------------------------------------------------------

def test_forward_velocity_golden():
    cfg, x, cond = golden_inputs()
    out = DiT(cfg).forward_velocity(x, 0.3, cond).data
    assert np.array_equal(out, load_tensor(GOLDEN / "forward_velocity.cstn"))


def test_project_audio_golden():
    cfg, _, cond = golden_inputs()
    out = DiT(cfg).project_audio(cond.audio[0]).data
    assert np.array_equal(out, load_tensor(GOLDEN / "project_audio.cstn"))


# ---- forward_velocity ----------------------------------------------------------

def test_full_mask_equals_all_permitting_block_mask(rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    x = rng.standard_normal((2, 6, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 2, 6, 2)
    block_mask = build_sparse_mask(ChunkLayout(6, 1, cfg.frame_tokens))
    assert block_mask.all()
    a = model.forward_velocity(x, [0.2, 0.7], cond).data
    b = model.forward_velocity(x, [0.2, 0.7], cond, block_mask).data
    assert np.abs(a - b).max() < 1e-12


def test_all_silence_ignores_audio(rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    x = rng.standard_normal((1, 5, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 1, 5, 1, modes=np.zeros((1, 5)))
    other = Conditioning(cond.reference, rng.standard_normal(cond.audio.shape), cond.modes)
    assert np.array_equal(model.forward_velocity(x, 0.5, cond).data, model.forward_velocity(x, 0.5, other).data)


def test_silence_frames_ignore_their_own_audio(rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    x = rng.standard_normal((1, 7, cfg.frame_tokens, cfg.latent_dim))
    modes = np.array([[1, 1, 0, 0, 1, 0, 1]])
    cond = random_cond(cfg, rng, 1, 7, 1, modes=modes)
    audio = cond.audio.copy()
    audio[:, modes[0] == Mode.SILENCE] += rng.standard_normal(audio[:, modes[0] == Mode.SILENCE].shape)
    other = Conditioning(cond.reference, audio, cond.modes)
    np.testing.assert_array_equal(model.forward_velocity(x, 0.4, cond).data,
                                  model.forward_velocity(x, 0.4, other).data)


@pytest.mark.parametrize("j", [0, 3, 6, 9])
def test_audio_locality(j, rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    n = 10
    x = rng.standard_normal((1, n, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 1, n, 0)
    mask = frame_diagonal_mask(n, cfg.frame_tokens)
    audio = cond.audio.copy()
    audio[0, j] += 1.0
    base = model.forward_velocity(x, 0.5, cond, mask).data
    moved = model.forward_velocity(x, 0.5, Conditioning(cond.reference, audio, cond.modes), mask).data
    changed = np.abs(base - moved).reshape(n, -1).max(axis=1) > 0
    half = (cfg.window_frames - 1) // 2
    for i in range(n):
        if abs(i - j) > half:
            assert not changed[i], (i, j)
    assert changed[j]


def test_reference_frames_are_pinned(rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    x = rng.standard_normal((1, 6, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 1, 6, 3)
    y = x.copy()
    y[:, :3] = rng.standard_normal(y[:, :3].shape)
    assert np.array_equal(model.forward_velocity(x, 0.5, cond).data, model.forward_velocity(y, 0.5, cond).data)


def test_forward_velocity_errors(rng):
    cfg = tiny_config()
    model = DiT(cfg)
    x = rng.standard_normal((1, 4, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 1, 4, 1)
    with pytest.raises(DimensionError):
        model.forward_velocity(x, 0.5, cond, np.ones((3, 3), bool))
    with pytest.raises(ConditioningError):
        model.forward_velocity(x, 0.5, Conditioning(cond.reference, cond.audio, cond.modes[:, :3]))
    with pytest.raises(ConditioningError):
        model.forward_velocity(x, 1.5, cond)
    with pytest.raises(DimensionError):
        model.forward_velocity(x[..., :2], 0.5, cond)


def test_unbatched_input_matches_batched(rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    x = rng.standard_normal((4, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 1, 4, 1)
    assert np.array_equal(model.forward_velocity(x, 0.5, cond).data, model.forward_velocity(x[None], 0.5, cond).data[0])


# ---- audio window ------------------------------------------------------------

def test_align_audio_window_examples(rng):
    cfg = tiny_config()
    model = DiT(cfg)
    audio = rng.standard_normal((21, cfg.audio_tokens_per_frame, cfg.model_dim))
    out = model.align_audio_window(audio, 10).data
    assert out.shape == (5 * cfg.audio_tokens_per_frame, cfg.model_dim)
    np.testing.assert_array_equal(out, audio[[8, 9, 10, 11, 12]].reshape(-1, cfg.model_dim))
    edge = model.align_audio_window(audio, 0).data
    np.testing.assert_array_equal(edge, audio[[0, 0, 0, 1, 2]].reshape(-1, cfg.model_dim))
    narrow = DiT(tiny_config(window_frames=1)).align_audio_window(audio, 7).data
    np.testing.assert_array_equal(narrow, audio[7])
    with pytest.raises(IndexError):
        model.align_audio_window(audio, 21)


def test_window_indices_clamp_both_edges():
    idx = window_indices(np.array([0, 1, 19, 20]), 5, 21)
    assert idx.tolist() == [[0, 0, 0, 1, 2], [0, 0, 1, 2, 3], [17, 18, 19, 20, 20], [18, 19, 20, 20, 20]]


# ---- audio cross-attention ---------------------------------------------------

def test_cross_attention_leaves_non_face_tokens_bitwise(rng):
    cfg = tiny_config(frame_tokens=6, face_token_ids=(2, 3))
    model = randomize(DiT(cfg))
    tokens = rng.standard_normal((cfg.frame_tokens, cfg.model_dim))
    audio = rng.standard_normal((10, cfg.model_dim))
    face = np.zeros(cfg.frame_tokens, bool)
    face[[2, 3]] = True
    out = model.audio_cross_attention(tokens, audio, face).data
    assert np.array_equal(out[~face], tokens[~face])
    assert not np.allclose(out[face], tokens[face])


def test_cross_attention_single_token_residual(rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    tokens = rng.standard_normal((cfg.frame_tokens, cfg.model_dim))
    audio = rng.standard_normal((1, cfg.model_dim))
    face = np.zeros(cfg.frame_tokens, bool)
    face[1] = True
    out = model.audio_cross_attention(tokens, audio, face).data
    p = {k: model.params[k].data for k in model.params}
    D = cfg.model_dim
    value = audio[0] @ p["blocks.0.cross.kv.w"][:, D:] + p["blocks.0.cross.kv.b"][D:]
    expected = value @ p["blocks.0.cross.out.w"] + p["blocks.0.cross.out.b"]
    np.testing.assert_allclose(out[1] - tokens[1], expected, atol=1e-13)


def test_cross_attention_rejects_empty_face_mask(rng):
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        DiT(cfg).audio_cross_attention(np.zeros((cfg.frame_tokens, cfg.model_dim)), np.zeros((2, cfg.model_dim)),
                                       np.zeros(cfg.frame_tokens, bool))


# ---- audio projection --------------------------------------------------------

def test_project_audio_zero_input_zero_final_layer():
    cfg = tiny_config()
    model = DiT(cfg)
    model.params.assign("audio.l3.w", np.zeros_like(model.params["audio.l3.w"].data))
    out = model.project_audio(np.zeros((4, cfg.audio_tokens_per_frame, cfg.audio_dim))).data
    assert np.array_equal(out, np.zeros_like(out))


def test_project_audio_is_per_frame(rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    audio = rng.standard_normal((6, cfg.audio_tokens_per_frame, cfg.audio_dim))
    perm = rng.permutation(6)
    assert np.array_equal(model.project_audio(audio[perm]).data, model.project_audio(audio).data[perm])
    with pytest.raises(DimensionError):
        model.project_audio(audio[..., :2])


def test_silence_embedding_starts_at_zero():
    model = DiT(tiny_config())
    assert np.array_equal(model.params["audio.silence"].data, np.zeros_like(model.params["audio.silence"].data))


# ---- config and parameters ---------------------------------------------------

@pytest.mark.parametrize("overrides", [{}, {"blocks": 3}, {"heads": 4, "model_dim": 16}, {"window_frames": 3},
                                       {"audio_tokens_per_frame": 1, "mlp_ratio": 3}])
def test_param_count_closed_form(overrides):
    cfg = tiny_config(**overrides)
    shapes = param_shapes(cfg)
    assert param_count(cfg) == sum(int(np.prod(s)) for s in shapes.values())
    assert init_params(cfg).num_scalars() == param_count(cfg)


def test_default_config_param_count():
    assert param_count(ModelConfig()) == sum(int(np.prod(s)) for s in param_shapes(ModelConfig()).values())


@pytest.mark.parametrize("bad", [{"model_dim": 10, "heads": 4}, {"window_frames": 4}, {"face_token_ids": ()},
                                 {"face_token_ids": (0, 99)}, {"face_token_ids": (1, 1)}])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        tiny_config(**bad)


def test_config_dict_round_trip():
    cfg = tiny_config()
    d = cfg.to_dict()
    assert isinstance(d["face_token_ids"], list)
    assert ModelConfig.from_dict(d) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**d, "depth": 3})


def test_conditioning_stack_and_select(rng):
    cfg = tiny_config()
    a, b = random_cond(cfg, rng, 1, 4, 1), random_cond(cfg, rng, 2, 4, 1)
    both = Conditioning.stack([a, b])
    assert both.batch == 3
    assert np.array_equal(both.select([1, 2]).audio, b.audio)
    styled = Conditioning(b.reference, b.audio, b.modes, np.zeros((2, cfg.model_dim)))
    with pytest.raises(ConditioningError):
        Conditioning.stack([a, styled])


def test_style_vector_changes_output(rng):
    cfg = tiny_config()
    model = randomize(DiT(cfg))
    x = rng.standard_normal((1, 3, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 1, 3, 1)
    styled = Conditioning(cond.reference, cond.audio, cond.modes, rng.standard_normal((1, cfg.model_dim)))
    assert not np.allclose(model.forward_velocity(x, 0.5, cond).data, model.forward_velocity(x, 0.5, styled).data)


def test_forward_is_deterministic(rng):
    cfg = tiny_config()
    x = rng.standard_normal((2, 3, cfg.frame_tokens, cfg.latent_dim))
    cond = random_cond(cfg, rng, 2, 3, 1)
    assert np.array_equal(DiT(cfg).forward_velocity(x, 0.1, cond).data, DiT(cfg).forward_velocity(x, 0.1, cond).data)
    assert isinstance(DiT(cfg).forward_velocity(x, 0.1, cond), Tensor)
