import numpy as np
import pytest

from dddr.diffusion import (
    AutoencoderPair,
    ConditionVector,
    DiffusionDims,
    PretrainConfig,
    PretrainedDiffusion,
    ScheduleError,
    build_schedule,
    condition_rows,
    draw_timesteps_and_noise,
    fit_linear_autoencoder,
    forward_diffuse,
    init_denoiser,
    ldm_loss,
    pretrain_diffusion,
    sample,
    time_embedding_table,
)
from dddr.gradcheck import finite_difference_check
from dddr.params import ParamSet
from dddr.rng import stream
from dddr.tensor import evaluate_with_gradients


@pytest.fixture(scope="module")
def tiny_model(pretrain_corpus):
    cfg = PretrainConfig(steps=300, batch=32, hidden=64, seed=9)
    return pretrain_diffusion(pretrain_corpus, cfg)


def test_schedule_cumulative_product_oracle():
    sched = build_schedule(4, 0.1, 0.4)
    assert np.allclose(sched.betas, [0.1, 0.2, 0.3, 0.4])
    assert np.allclose(sched.alphas_bar, [0.9, 0.72, 0.504, 0.3024])


def test_schedule_strictly_decreasing():
    sched = build_schedule(50, 1e-4, 0.2)
    assert np.all(np.diff(sched.alphas_bar) < 0)


def test_schedule_rejects_t1_and_bad_bounds():
    with pytest.raises(ScheduleError):
        build_schedule(1, 0.1, 0.2)
    with pytest.raises(ScheduleError):
        build_schedule(10, 0.0, 0.2)
    with pytest.raises(ScheduleError):
        build_schedule(10, 0.3, 0.2)


def test_forward_diffuse_zero_noise_limit():
    sched = build_schedule(10, 0.01, 0.1)
    z0 = np.full((2, 4), 0.5, dtype=np.float32)
    out = forward_diffuse(z0, 3, np.zeros_like(z0), sched)
    assert np.allclose(out, np.sqrt(sched.alpha_bar(3)) * z0, atol=1e-6)


def test_forward_diffuse_zero_signal_limit():
    sched = build_schedule(10, 0.01, 0.1)
    eps = stream(1, "fd").standard_normal((3, 5)).astype(np.float32)
    out = forward_diffuse(np.zeros_like(eps), 7, eps, sched)
    assert np.allclose(out, np.sqrt(1 - sched.alpha_bar(7)) * eps, atol=1e-6)


def test_forward_diffuse_rejects_bad_t_and_shape():
    sched = build_schedule(10, 0.01, 0.1)
    z = np.zeros((1, 4), dtype=np.float32)
    with pytest.raises(ValueError):
        forward_diffuse(z, 0, z, sched)
    with pytest.raises(ValueError):
        forward_diffuse(z, 11, z, sched)
    with pytest.raises(ValueError):
        forward_diffuse(z, 2, np.zeros((2, 4), dtype=np.float32), sched)


@pytest.mark.parametrize("t_frac", [1, 50, 100])
def test_forward_diffuse_marginal_variance(t_frac):
    sched = build_schedule(100, 1e-4, 0.2)
    rng = stream(17, "mc", t_frac)
    n = 10_000
    z0 = np.full((n, 1), 0.25, dtype=np.float32)
    eps = rng.standard_normal((n, 1)).astype(np.float32)
    z_t = forward_diffuse(z0, t_frac, eps, sched)
    residual = z_t - np.sqrt(sched.alpha_bar(t_frac)) * z0
    target = 1.0 - sched.alpha_bar(t_frac)
    assert abs(residual.var() - target) <= 0.05 * target


def test_ldm_loss_zero_predictor_close_to_dim(pretrain_corpus):
    # a denoiser that always outputs 0 scores mean ||eps||^2 ~ latent dim
    dims = DiffusionDims(latent_dim=256, hidden=16)
    params = init_denoiser(dims, seed=0)
    zeroed = ParamSet({k: np.zeros_like(v) for k, v in params.items()})
    sched = build_schedule(100, 1e-4, 0.2)
    tt = time_embedding_table(100, dims.time_dim)
    rng = stream(3, "zero-pred")
    flat = pretrain_corpus.images[:512].reshape(-1, 256)
    t, eps = draw_timesteps_and_noise(rng, flat.shape[0], 256, 100)
    cond = np.zeros((flat.shape[0], dims.cond_dim), dtype=np.float32)

    def f(leaves):
        return ldm_loss(leaves, flat, cond, sched, t, eps, tt)

    loss, _ = evaluate_with_gradients(f, zeroed)
    assert abs(loss - 256.0) / 256.0 < 0.1


def test_ldm_loss_gradients_match_finite_differences():
    dims = DiffusionDims(latent_dim=6, embed_dim=3, time_dim=4, hidden=5)
    params = init_denoiser(dims, seed=4)
    sched = build_schedule(5, 0.05, 0.3)
    tt = time_embedding_table(5, dims.time_dim)
    rng = stream(5, "fd-ldm")
    z0 = rng.uniform(0, 1, (4, 6)).astype(np.float32)
    t, eps = draw_timesteps_and_noise(rng, 4, 6, 5)
    cond = rng.normal(0, 0.3, (4, dims.cond_dim)).astype(np.float32)

    def f(leaves):
        return ldm_loss(leaves, z0, cond, sched, t, eps, tt)

    report = finite_difference_check(f, params, tolerance=1e-3)
    assert report.passed, report.worst()


def test_ldm_loss_differentiable_through_condition_only():
    dims = DiffusionDims(latent_dim=6, embed_dim=3, time_dim=4, hidden=5)
    denoiser = init_denoiser(dims, seed=4)
    sched = build_schedule(5, 0.05, 0.3)
    tt = time_embedding_table(5, dims.time_dim)
    rng = stream(6, "inv-grad")
    z0 = rng.uniform(0, 1, (3, 6)).astype(np.float32)
    t, eps = draw_timesteps_and_noise(rng, 3, 6, 5)
    prompt = rng.normal(0, 0.3, 3).astype(np.float32)
    vcfg = ParamSet({"v": rng.normal(0, 0.3, 3).astype(np.float32)})

    def f(leaves):
        cond = condition_rows(prompt, leaves["v"], 3)
        return ldm_loss(denoiser, z0, cond, sched, t, eps, tt)

    report = finite_difference_check(f, vcfg, tolerance=1e-3)
    assert report.passed, report.worst()


def test_pretrain_is_deterministic(pretrain_corpus):
    cfg = PretrainConfig(steps=40, batch=16, hidden=32, seed=13)
    a = pretrain_diffusion(pretrain_corpus, cfg)
    b = pretrain_diffusion(pretrain_corpus, cfg)
    assert a.checksum() == b.checksum()
    assert a.loss_trace == b.loss_trace


def test_pretrain_reduces_probe_loss(tiny_model):
    assert tiny_model.probe_final < tiny_model.probe_initial


def test_sample_deterministic_and_clamped(tiny_model):
    cond = ConditionVector(tiny_model.prompt, tiny_model.class_embeddings[0])
    a = sample(tiny_model.params, cond, 8, tiny_model.sched, stream(2, "s"), tiny_model.temb_table)
    b = sample(tiny_model.params, cond, 8, tiny_model.sched, stream(2, "s"), tiny_model.temb_table)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_sample_rejects_nonpositive_n(tiny_model):
    cond = ConditionVector(tiny_model.prompt, tiny_model.class_embeddings[0])
    with pytest.raises(ValueError):
        sample(tiny_model.params, cond, 0, tiny_model.sched, stream(2, "s"), tiny_model.temb_table)


def test_diffusion_checkpoint_round_trip(tiny_model, tmp_path):
    path = tmp_path / "diffusion.ckpt"
    tiny_model.save(path)
    loaded = PretrainedDiffusion.load(path)
    assert loaded.checksum() == tiny_model.checksum()
    assert loaded.sched.T == tiny_model.sched.T
    assert sorted(loaded.class_embeddings) == sorted(tiny_model.class_embeddings)
    cond = ConditionVector(tiny_model.prompt, tiny_model.class_embeddings[1])
    a = sample(tiny_model.params, cond, 4, tiny_model.sched, stream(4, "rt"), tiny_model.temb_table)
    b = sample(loaded.params, cond, 4, loaded.sched, stream(4, "rt"), loaded.temb_table)
    assert np.array_equal(a, b)


def test_identity_autoencoder_round_trip():
    pair = AutoencoderPair()
    x = stream(8, "ae").uniform(0, 1, (5, 16)).astype(np.float32)
    assert np.array_equal(pair.decode(pair.encode(x)), x)


def test_linear_autoencoder_bounds_reconstruction(pretrain_corpus):
    images = pretrain_corpus.images[:200]
    pair = fit_linear_autoencoder(images, latent_dim=64, mse_bound=0.05)
    assert pair.train_mse is not None and pair.train_mse <= 0.05
    flat = images.reshape(200, -1)
    recon = pair.decode(pair.encode(flat))
    assert recon.shape == flat.shape


def test_linear_autoencoder_rejects_wrong_latent_dim(pretrain_corpus):
    pair = fit_linear_autoencoder(pretrain_corpus.images[:50], latent_dim=8, mse_bound=1.0)
    with pytest.raises(ValueError, match="latent dim"):
        pair.decode(np.zeros((2, 9), dtype=np.float32))


def test_time_embedding_rows_are_distinct():
    table = time_embedding_table(100, 16)
    assert table.shape == (101, 16)
    diffs = np.linalg.norm(table[1:] - table[:-1], axis=1)
    assert (diffs > 1e-3).all()
