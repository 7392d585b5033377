import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkcast.errors import ConfigError, ContractError, DimensionError, UndefinedCorrelationError
from chunkcast.model import Mode
from chunkcast.synthdata import (Clip, PseudoVAE, PuppetSpec, audio_projection, check_face_tokens, face_token_ids,
                                 generate_clip, generate_dataset, head_positions, load_clip, load_dataset, mouth_openness,
                                 render_frames, sample_modes, save_clip, sync_score, write_dataset)

SPEC = PuppetSpec()
SILENT = np.full(SPEC.frames, Mode.SILENCE, dtype=np.int8)


def test_all_silence_clip_has_closed_mouth():
    clip = generate_clip(SPEC, 3, SILENT)
    assert np.abs(mouth_openness(clip.frames, SPEC)).max() < 1e-9


def test_constant_amplitude_without_sway_gives_identical_frames():
    spec = PuppetSpec(sway_amplitude=0.0)
    n = spec.frames
    frames = render_frames(spec, np.full(n, 0.6), np.ones(n, np.int8), head_positions(spec, 0.3, n))
    assert all(np.array_equal(frames[0], f) for f in frames)


@pytest.mark.parametrize("seed", range(5))
def test_ground_truth_openness_tracks_amplitude(seed):
    clip = generate_clip(SPEC, seed)
    np.testing.assert_allclose(mouth_openness(clip.frames, SPEC), clip.amplitude, atol=1e-12)
    assert sync_score(clip.frames, clip.amplitude, clip.modes, SPEC) > 0.999


def test_openness_monotone_in_amplitude():
    n = 9
    amps = np.linspace(0.1, 1.0, n)
    frames = render_frames(SPEC, amps, np.ones(n, np.int8), head_positions(SPEC, 1.0, n))
    assert np.all(np.diff(mouth_openness(frames, SPEC)) > 0)


def test_vae_round_trip_preserves_openness():
    vae = PseudoVAE(SPEC)
    clip = generate_clip(SPEC, 7)
    restored = vae.decode(vae.encode(clip.frames))
    assert np.abs(restored - clip.frames).max() < 1e-10
    assert np.abs(mouth_openness(restored, SPEC) - mouth_openness(clip.frames, SPEC)).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_vae_is_orthogonal(seed):
    vae = PseudoVAE(SPEC, seed=seed % 7)
    x = np.random.default_rng(seed).standard_normal((3, 16, 16))
    z = vae.encode(x)
    assert z.shape == (3, SPEC.frame_tokens, SPEC.latent_dim)
    assert abs(np.linalg.norm(z) - np.linalg.norm(x)) < 1e-10
    assert np.abs(vae.decode(z) - x).max() < 1e-10


def test_vae_dimension_errors():
    vae = PseudoVAE(SPEC)
    with pytest.raises(DimensionError):
        vae.encode(np.zeros((8, 8)))
    with pytest.raises(DimensionError):
        vae.decode(np.zeros((15, 16)))


def test_simulated_decode_cost():
    vae = PseudoVAE(SPEC, simulated_decode_cost_ms=25.0)
    z = vae.encode(np.zeros((3, 16, 16)))
    start = time.perf_counter()
    vae.decode(z)
    assert (time.perf_counter() - start) * 1e3 >= 25.0


# ---- sync oracle ---------------------------------------------------------------

def test_shuffled_frames_lose_sync():
    hits = 0
    for seed in range(100):
        clip = generate_clip(SPEC, seed)
        perm = np.random.default_rng([seed, 9]).permutation(clip.n_frames)
        hits += abs(sync_score(clip.frames[perm], clip.amplitude, clip.modes, SPEC)) < 0.5
    assert hits > 95


def test_shuffled_amplitude_95th_percentile():
    scores = []
    for seed in range(100):
        clip = generate_clip(SPEC, seed)
        amp = np.random.default_rng([seed, 10]).permutation(clip.amplitude)
        scores.append(sync_score(clip.frames, amp, clip.modes, SPEC))
    assert np.percentile(scores, 95) < 0.5


def test_negated_amplitude_negates_score():
    clip = generate_clip(SPEC, 11)
    noisy = clip.frames + 0.05 * np.random.default_rng(0).standard_normal(clip.frames.shape)
    score = sync_score(noisy, clip.amplitude, clip.modes, SPEC)
    assert sync_score(noisy, -clip.amplitude, clip.modes, SPEC) == -score


def test_sync_score_contract_errors():
    clip = generate_clip(SPEC, 2)
    modes = clip.modes.copy()
    modes[:14] = Mode.SILENCE
    with pytest.raises(ContractError):
        sync_score(clip.frames, clip.amplitude, modes, SPEC)
    with pytest.raises(UndefinedCorrelationError):
        sync_score(clip.frames, np.ones(clip.n_frames), clip.modes, SPEC)
    with pytest.raises(DimensionError):
        sync_score(clip.frames, clip.amplitude[:-1], clip.modes[:-1], SPEC)
    # silence frames can be scored too; a closed mouth is constant
    with pytest.raises(UndefinedCorrelationError):
        sync_score(generate_clip(SPEC, 2, SILENT).frames, clip.amplitude, SILENT, SPEC, select=Mode.SILENCE)


# ---- generation contracts -------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 5, 123])
def test_silence_frames_match_zero_amplitude_rendering(seed):
    modes = sample_modes(np.random.default_rng(seed), SPEC.frames, p_speaking=0.0, p_silence=0.0)
    clip = generate_clip(SPEC, seed, modes)
    phase = np.random.default_rng(seed)
    phase.uniform(0, 1, SPEC.frames + 2)
    head = head_positions(SPEC, phase.uniform(0.0, 2 * np.pi), SPEC.frames)
    zero = render_frames(SPEC, np.zeros(SPEC.frames), np.ones(SPEC.frames, np.int8), head)
    silent = modes == Mode.SILENCE
    assert silent.any() and (~silent).any()
    assert np.array_equal(clip.frames[silent], zero[silent])


def test_clip_determinism_and_audio():
    a, b = generate_clip(SPEC, 42), generate_clip(SPEC, 42)
    for field in ("frames", "audio", "modes", "amplitude"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert not np.array_equal(a.frames, generate_clip(SPEC, 43).frames)
    assert a.audio.shape == (SPEC.frames, SPEC.audio_rate, SPEC.audio_dim)
    # audio carries the amplitude along one fixed direction
    along = np.einsum("fad,ad->f", a.audio, audio_projection(SPEC))
    assert np.abs(along - a.amplitude).max() < 5 * SPEC.audio_noise


def test_generate_clip_mode_shape_error():
    with pytest.raises(DimensionError):
        generate_clip(SPEC, 0, np.ones(5, np.int8))


def test_spec_validation_and_face_tokens():
    with pytest.raises(ConfigError):
        PuppetSpec(mouth_rows=(2, 4))
    with pytest.raises(ConfigError):
        PuppetSpec(grid=(18, 16))
    assert face_token_ids(SPEC) == (8, 9, 10, 11)
    check_face_tokens(SPEC, (11, 10, 9, 8))
    with pytest.raises(ConfigError):
        check_face_tokens(SPEC, (4, 5, 6, 7))
    with pytest.raises(ConfigError):
        PuppetSpec.from_dict({"grid": (16, 16), "bogus": 1})


# ---- dataset IO -------------------------------------------------------------------

def test_clip_file_round_trip(tmp_path):
    clip = generate_clip(SPEC, 8, sample_modes(np.random.default_rng(1), SPEC.frames))
    save_clip(tmp_path, "c", clip)
    back = load_clip(tmp_path, "c")
    assert isinstance(back, Clip)
    for field in ("frames", "audio", "modes", "amplitude"):
        assert np.array_equal(getattr(back, field), getattr(clip, field))
    assert back.spec == clip.spec and back.seed == clip.seed
    assert set(json.loads((tmp_path / "c.json").read_text())) >= {"modes", "amplitude", "spec", "seed"}


def test_dataset_manifest_deterministic(tmp_path):
    first = write_dataset(tmp_path / "a", SPEC, 10, seed=4)
    second = write_dataset(tmp_path / "b", SPEC, 10, seed=4)
    assert first.read_bytes() == second.read_bytes()
    manifest = json.loads(first.read_text())
    assert [e["split"] for e in manifest["clips"]].count("val") == 1
    assert len(load_dataset(tmp_path / "a", "train")) == 9
    with pytest.raises(ConfigError):
        write_dataset(tmp_path / "a", SPEC, 10, seed=4)
    write_dataset(tmp_path / "a", SPEC, 3, seed=5, force=True)
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "missing")


def test_in_memory_dataset_matches_disk(tmp_path):
    write_dataset(tmp_path, SPEC, 4, seed=2)
    disk = load_dataset(tmp_path)
    mem = generate_dataset(SPEC, 4, seed=2)
    assert all(np.array_equal(d.frames, m.frames) for d, (_, m, _) in zip(disk, mem))


def test_sample_modes_kinds():
    rng = np.random.default_rng(0)
    kinds = set()
    for _ in range(200):
        m = sample_modes(rng, 21)
        switches = int(np.count_nonzero(np.diff(m)))
        assert switches <= 1
        kinds.add((switches, int(m[0])))
    assert kinds == {(0, Mode.SPEAKING), (0, Mode.SILENCE), (1, Mode.SPEAKING), (1, Mode.SILENCE)}
