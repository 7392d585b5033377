import hashlib

import numpy as np
import pytest

from chunkcast.chunking import ChunkLayout, build_sparse_mask
from chunkcast.distill import (NORM_FLOOR, Batch, DistillAbort, DistillConfig, DistillState, MixSchedule,
                               dmd_direction, dmd_gradient_loss, distill_step, fake_score_step, generate_synthetic,
                               kl_gradient_estimate, model_score_fn, regression_loss, score_to_x1, velocity_to_score)
from chunkcast.errors import ContractError
from chunkcast.model import DiT, MLPVelocity
from chunkcast.numerics import Adam, ParamSet, Tensor, backward
from chunkcast.schedule import LogitNormalSampler, StudentSchedule, fm_training_loss

from conftest import random_cond, randomize, tiny_config


def checksum(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def gaussian_score(m, s):
    """Score of the path marginal N(t*m, t^2 s^2 + (1-t)^2)."""
    def fn(x, t):
        t = np.asarray(t, dtype=float).reshape((-1,) + (1,) * (np.ndim(x) - 1))
        return -(x - t * m) / (t**2 * s**2 + (1 - t) ** 2)
    return fn


def gaussian_kl(mu1, var1, mu2, var2):
    return 0.5 * np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / (2 * var2) - 0.5


def kl_gradient_oracle(g, t, data_mean=2.0, h=1e-6):
    """d/dg KL(N(t g, (1-t)^2) || N(t m, t^2 + (1-t)^2)), by differencing the closed-form KL."""
    var_gen, var_data = (1 - t) ** 2, t**2 + (1 - t) ** 2
    plus = gaussian_kl(t * (g + h), var_gen, t * data_mean, var_data)
    minus = gaussian_kl(t * (g - h), var_gen, t * data_mean, var_data)
    return (plus - minus) / (2 * h)


# ---- score identity ----------------------------------------------------------

@pytest.mark.parametrize("t", [0.05, 0.3, 0.6, 0.95])
def test_velocity_to_score_point_mass_is_exact(t, rng):
    c = 1.7
    x = rng.standard_normal(20) * 2
    u = (c - x) / (1 - t)
    analytic = -(x - t * c) / (1 - t) ** 2
    np.testing.assert_allclose(velocity_to_score(u, x, t), analytic, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(score_to_x1(analytic, x, t), np.full(20, c), rtol=1e-12)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.85])
def test_velocity_to_score_gaussian_is_exact(t, rng):
    m, s = 2.0, 0.5
    x = rng.standard_normal((12, 1))
    var = t**2 * s**2 + (1 - t) ** 2
    u = m + (t * s**2 - (1 - t)) / var * (x - t * m)
    np.testing.assert_allclose(velocity_to_score(u, x, t), gaussian_score(m, s)(x, t), rtol=1e-12, atol=1e-12)


def test_score_undefined_at_endpoints():
    for t in (0.0, 1.0):
        with pytest.raises(ContractError):
            velocity_to_score(np.zeros(2), np.zeros(2), t)


def test_trained_point_mass_model_recovers_analytic_score():
    c = 1.5
    model = MLPVelocity(dim=1, hidden=64, seed=0)
    opt = Adam(model.params, 2e-3)
    rng = np.random.default_rng([0, 1])  # independent of the timestep stream
    sampler = LogitNormalSampler(seed=0)
    for _ in range(1500):
        x0 = rng.standard_normal((256, 1))
        loss = fm_training_loss(model, np.full((256, 1), c), None, sampler.sample(256), x0)
        opt.step(backward(loss, model.params))
    score = model_score_fn(model)
    errs, scale = [], []
    for t in np.linspace(0.1, 0.8, 8):
        x = t * c + (1 - t) * np.linspace(-2, 2, 21)[:, None]
        analytic = -(x - t * c) / (1 - t) ** 2
        errs.append(score(x, np.full(21, t)) - analytic)
        scale.append(analytic)
    rms = np.sqrt(np.mean(np.square(errs))) / np.sqrt(np.mean(np.square(scale)))
    assert rms < 0.1


# ---- DMD gradient --------------------------------------------------------------

@pytest.mark.parametrize("g,t", [(-1.0, 0.2), (0.0, 0.5), (0.5, 0.8), (1.0, 0.3), (1.5, 0.6),
                                 (2.5, 0.4), (3.0, 0.9), (3.5, 0.15), (4.0, 0.7), (5.0, 0.55)])
def test_gaussian_kl_gradient_oracle(g, t):
    half = np.random.default_rng(int(100 * g + 1000 * t)).standard_normal((10_000, 1))
    noise = np.concatenate([half, -half])  # antithetic: both scores are linear in x_t, so the mean is exact
    x_gen = np.full((20_000, 1), g)
    point_mass = lambda x, tt: -(x - np.asarray(tt).reshape(-1, 1) * g) / (1 - np.asarray(tt).reshape(-1, 1)) ** 2  # noqa: E731
    est = kl_gradient_estimate(x_gen, np.full(20_000, t), gaussian_score(2.0, 1.0), point_mass, noise).mean()
    oracle = kl_gradient_oracle(g, t)
    assert est == pytest.approx(oracle, rel=1e-6, abs=1e-9)
    # descending the gradient moves g toward the data mean
    assert np.sign(-est) == np.sign(2.0 - g)


def test_identical_scores_give_zero_gradient(rng):
    cfg = tiny_config()
    teacher = randomize(DiT(cfg))
    fake = teacher.clone()
    cond = random_cond(cfg, rng, 2, 4, 1)
    student = teacher.clone()
    x_gen = student.forward_velocity(rng.standard_normal((2, 4, cfg.frame_tokens, cfg.latent_dim)), 0.0, cond)
    loss = dmd_gradient_loss(x_gen, np.array([0.3, 0.6]), teacher, fake, cond, rng.standard_normal(x_gen.shape))
    grads = backward(loss, student.params)
    assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())


def test_normalizer_clamps_at_floor(rng):
    g = rng.standard_normal((3, 2))

    def at_generator(x, t):
        t = np.asarray(t).reshape(-1, 1)
        return (t * g - x) / (1 - t) ** 2

    def elsewhere(x, t):
        return at_generator(x, t) + 1.0

    d, norm = dmd_direction(g, np.full(3, 0.4), at_generator, elsewhere, rng.standard_normal((3, 2)))
    assert np.all(norm == NORM_FLOOR)
    assert np.isfinite(d).all()


def test_dmd_surrogate_gradient_is_direction(rng):
    class Analytic:
        def __init__(self, fn):
            self.fn = fn

        def velocity(self, x_t, tt, cond=None, self_mask=None, layout=None):
            tt = np.asarray(tt).reshape(-1, 1)
            return Tensor(((1 - tt) * self.fn(x_t, tt) + x_t) / tt)  # inverse of the score identity

    s_data, s_gen = gaussian_score(2.0, 1.0), gaussian_score(0.0, 1.0)
    params = ParamSet({"x": rng.standard_normal((2, 3))})
    noise = rng.standard_normal((2, 3))
    t = np.array([0.3, 0.7])
    d, _ = dmd_direction(params["x"].data, t, s_data, s_gen, noise)
    loss = dmd_gradient_loss(params["x"], t, Analytic(s_data), Analytic(s_gen), None, noise)
    grad = backward(loss, params)["x"]
    np.testing.assert_allclose(grad, d / d.size, rtol=1e-10, atol=1e-14)


def test_dmd_rejects_endpoint_timesteps(rng):
    x = Tensor(rng.standard_normal((1, 2)))
    model = MLPVelocity(dim=2)
    with pytest.raises(ContractError):
        dmd_gradient_loss(x, np.array([1.0]), model, model, None, rng.standard_normal((1, 2)))


# ---- regression loss -----------------------------------------------------------

def test_regression_loss_examples(rng):
    x = rng.standard_normal((2, 3))
    assert regression_loss(Tensor(x), x).item() == 0.0
    assert regression_loss(Tensor(np.zeros(5)), np.ones(5)).item() == 1.0
    y = rng.standard_normal((2, 3))
    assert regression_loss(Tensor(x), y).item() == pytest.approx(np.mean((x - y) ** 2), rel=1e-14)
    with pytest.raises(ContractError):
        regression_loss(Tensor(x), y, synthetic=True)
    with pytest.raises(ContractError):
        regression_loss(Tensor(x), None)


# ---- fake score ----------------------------------------------------------------

def fixed_batch_loss(model, x1, seed=99):
    rng = np.random.default_rng([seed, 1])
    t = LogitNormalSampler(seed=seed).sample(x1.shape[0])
    return float(fm_training_loss(model, x1, None, t, rng.standard_normal(x1.shape)).data)


def test_fake_score_fits_point_mass_monotonically():
    curves = []
    for seed in range(5):
        fake = MLPVelocity(dim=1, hidden=32, seed=seed)
        opt = Adam(fake.params, 3e-3)
        sampler = LogitNormalSampler(seed=seed)
        rng = np.random.default_rng([seed, 1])
        samples = Tensor(np.full((128, 1), 1.25))
        curve = [fixed_batch_loss(fake, samples.data)]
        for _ in range(50):
            fake_score_step(fake, samples, sampler, opt, rng=rng)
            curve.append(fixed_batch_loss(fake, samples.data))
        curves.append(curve)
    median = np.median(np.array(curves), axis=0)
    blocks = median[1:].reshape(10, 5).mean(axis=1)
    assert np.all(np.diff(blocks) < 0), blocks
    assert median[-1] < 0.5 * median[0]


def test_fake_score_zero_lr_is_bitwise_noop():
    fake = MLPVelocity(dim=1, seed=3)
    before = checksum(fake.params)
    fake_score_step(fake, Tensor(np.ones((8, 1))), LogitNormalSampler(), Adam(fake.params, 0.0),
                    rng=np.random.default_rng(0))
    assert checksum(fake.params) == before


def test_fake_score_loss_matches_fm_loss():
    fake = MLPVelocity(dim=1, seed=4)
    x1 = np.linspace(-1, 1, 16)[:, None]
    reported = fake_score_step(fake.clone(), Tensor(x1), LogitNormalSampler(seed=5), Adam(fake.params, 0.0),
                               rng=np.random.default_rng(6))
    x0 = np.random.default_rng(6).standard_normal(x1.shape)
    t = LogitNormalSampler(seed=5).sample(16)
    assert reported == float(fm_training_loss(fake, x1, None, t, x0).data)


def test_fake_score_rejects_grad_carrying_samples():
    fake = MLPVelocity(dim=1)
    with pytest.raises(ContractError):
        fake_score_step(fake, Tensor(np.ones((2, 1)), requires_grad=True), LogitNormalSampler(),
                        Adam(fake.params))


# ---- synthetic samples -------------------------------------------------------

def test_generate_synthetic_shape_and_determinism(rng):
    cfg = tiny_config()
    student = randomize(DiT(cfg))
    layout = ChunkLayout(2, 4, cfg.frame_tokens)
    image = rng.standard_normal((2, cfg.frame_tokens, cfg.latent_dim))
    audio = rng.standard_normal((8, cfg.audio_tokens_per_frame, cfg.audio_dim))
    a = generate_synthetic(student, image, audio, seed=7, layout=layout)
    b = generate_synthetic(student, image, audio, seed=7, layout=layout)
    assert a.shape == (8, cfg.frame_tokens, cfg.latent_dim)
    assert np.array_equal(a, b)
    assert np.array_equal(a[:2], image)
    assert not np.array_equal(a, generate_synthetic(student, image, audio, seed=8, layout=layout))


# ---- mix schedule and training step -------------------------------------------

def toy_state(**overrides):
    cfg = DistillConfig(**{"steps": 10, "batch": 64, "lr_student": 1e-4, "lr_fake": 1e-3, **overrides})
    return DistillState(MLPVelocity(dim=1, hidden=16, seed=0), cfg)


def test_mix_schedule_warmup_and_ratio():
    mix = MixSchedule(warmup_steps=5, synthetic_ratio=0.5, seed=0)
    assert all(not mix.draw(s, 64).any() for s in range(5))
    fractions = [mix.draw(s, 64).mean() for s in range(5, 205)]
    assert abs(np.mean(fractions) - 0.5) < 0.05


def test_distill_step_mix_fraction_statistics():
    state = toy_state(steps=200, warmup_fraction=0.0, synthetic_ratio=0.5)
    x1 = np.random.default_rng(0).normal(2.0, 0.5, (64, 1))
    fractions = [distill_step(Batch(x1), state)["mix_fraction"] for _ in range(200)]
    assert abs(np.mean(fractions) - 0.5) < 0.05


def test_distill_step_warmup_is_real_only():
    state = toy_state(steps=10, warmup_fraction=0.4)
    x1 = np.ones((64, 1))
    metrics = [distill_step(Batch(x1), state) for _ in range(6)]
    assert [m["mix_fraction"] for m in metrics[:4]] == [0.0] * 4
    assert metrics[4]["mix_fraction"] > 0.0
    assert set(metrics[0]) >= {"dmd_loss", "reg_loss", "fake_loss", "mix_fraction"}


def test_zero_regression_and_matched_fake_leave_student_unchanged():
    state = toy_state(lambda_reg=0.0)
    before = checksum(state.student.params)
    distill_step(Batch(np.ones((64, 1))), state)
    assert checksum(state.student.params) == before


def test_teacher_is_frozen():
    state = toy_state()
    before = checksum(state.teacher.params)
    for _ in range(3):
        distill_step(Batch(np.ones((64, 1))), state)
    assert checksum(state.teacher.params) == before
    assert checksum(state.student.params) != before


def test_attention_asymmetry_and_global_timestep(rng):
    cfg = tiny_config()
    teacher = randomize(DiT(cfg))
    layout = ChunkLayout(2, 3, cfg.frame_tokens)
    calls = []

    def spy(name, model):
        real = model.forward_velocity

        def wrapped(x, t, cond, self_mask=None, layout=None):
            calls.append((name, None if self_mask is None else self_mask.copy(), np.asarray(t).copy()))
            return real(x, t, cond, self_mask, layout)

        model.velocity = wrapped
        return model

    state = DistillState(spy("teacher", teacher), DistillConfig(steps=4, batch=2), layout,
                         student=spy("student", teacher.clone()), fake_score=spy("fake", teacher.clone()))
    cond = random_cond(cfg, rng, 2, 6, 2)
    distill_step(Batch(rng.standard_normal((2, 6, cfg.frame_tokens, cfg.latent_dim)), cond), state)
    sparse = build_sparse_mask(layout)
    for name, mask, t in calls:
        if name == "student":
            assert np.array_equal(mask, sparse)
        else:
            assert mask is None
        assert t.shape == (2,)  # one timestep per sample for all of its chunks
    assert {name for name, _, _ in calls} == {"teacher", "student", "fake"}


def test_windowed_distill_fills_pool_and_swaps_reference(rng):
    cfg = tiny_config()
    teacher = randomize(DiT(cfg))
    layout = ChunkLayout(2, 3, cfg.frame_tokens)
    state = DistillState(teacher, DistillConfig(steps=4, batch=2, warmup_fraction=0.0, synthetic_ratio=1.0), layout)
    cond = random_cond(cfg, rng, 2, 6, 2)
    x1 = rng.standard_normal((2, 6, cfg.frame_tokens, cfg.latent_dim))
    first = distill_step(Batch(x1, cond), state)
    assert first["mix_fraction"] == 0.0  # no earlier student output yet
    assert len(state.pool) == 2
    swapped = state.synthetic_conditioning(cond, np.array([True, False]))
    assert any(np.array_equal(swapped.reference[0], p) for p in state.pool)
    assert np.array_equal(swapped.reference[1], cond.reference[1])
    second = distill_step(Batch(x1, cond), state)
    assert second["mix_fraction"] == 1.0 and second["reg_loss"] == 0.0


def test_non_finite_scores_abort_with_snapshot():
    class Broken(MLPVelocity):
        def velocity(self, x, t, cond=None, self_mask=None, layout=None):
            return Tensor(np.full(np.shape(x.data if isinstance(x, Tensor) else x), np.nan))

    teacher = Broken(dim=1)
    state = DistillState(teacher, DistillConfig(steps=2, batch=4, seed=3), student=MLPVelocity(dim=1),
                         fake_score=MLPVelocity(dim=1))
    with pytest.raises(DistillAbort) as info:
        distill_step(Batch(np.ones((4, 1))), state)
    snap = info.value.snapshot
    assert snap["seed"] == 3 and snap["t"].shape == (4,) and "noise" in snap


def test_distill_config_validation():
    with pytest.raises(Exception):
        DistillConfig(sigmas=(0.5,))
    with pytest.raises(Exception):
        DistillConfig(lambda_reg=-1.0)
    assert StudentSchedule(DistillConfig().sigmas).nfe == 2
