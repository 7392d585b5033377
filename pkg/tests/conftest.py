import numpy as np
import pytest

from chunkcast.model import Conditioning, DiT, Mode, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(frame_tokens=4, latent_dim=3, model_dim=8, heads=2, blocks=1, audio_dim=3,
                audio_tokens_per_frame=2, face_token_ids=(1, 2), time_features=4, max_offset=2)
    base.update(overrides)
    return ModelConfig(**base)


def random_cond(cfg: ModelConfig, rng, batch: int, frames: int, ref_len: int, modes=None) -> Conditioning:
    if modes is None:
        modes = np.full((batch, frames), Mode.SPEAKING, dtype=np.int8)
    return Conditioning(
        rng.standard_normal((batch, ref_len, cfg.frame_tokens, cfg.latent_dim)),
        rng.standard_normal((batch, frames, cfg.audio_tokens_per_frame, cfg.audio_dim)),
        np.asarray(modes, dtype=np.int8),
    )


def randomize(model: DiT, seed: int = 0, scale: float = 0.3) -> DiT:
    """Give zero-initialized parameters (biases, silence embedding) non-trivial values."""
    rng = np.random.default_rng(seed)
    for name in model.params:
        p = model.params[name]
        model.params.assign(name, p.data + scale * rng.standard_normal(p.shape))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
