import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from darcyinv.errors import ConfigError, DimensionMismatch, FormatError
from darcyinv.mlp import MlpParams, mlp_init
from darcyinv.training import (
    Dataset,
    TrainConfig,
    TrainHistory,
    _PermutationStream,
    batch_loss_and_grad,
    coef_loss,
    generate_dataset,
    load_dataset,
    pressure_loss,
    predict_coefficients,
    save_dataset,
    total_pi_loss,
    train,
)

# 0.1 * sqrt(2/pi), the mean of |0.1 * xi| for standard normal xi
HALF_NORMAL_MEAN = 0.07978845608028654


def test_noise_free_and_relative_noise(desk_ctx):
    clean = generate_dataset(20, desk_ctx, 0.0, 3)
    assert np.array_equal(clean.noisy, clean.clean)
    ds = generate_dataset(500, desk_ctx, 0.1, 4)
    rel = np.abs(ds.noisy - ds.clean) / np.abs(ds.clean)
    assert rel.size == 100_000
    assert rel.mean() == pytest.approx(HALF_NORMAL_MEAN, rel=0.02)
    assert np.all(np.isfinite(ds.noisy))


def test_generate_deterministic_across_threads(desk_ctx):
    a = generate_dataset(150, desk_ctx, 0.1, 9, threads=1)
    b = generate_dataset(150, desk_ctx, 0.1, 9, threads=3)
    assert np.array_equal(a.coeffs, b.coeffs) and np.array_equal(a.noisy, b.noisy)


def test_generate_rejects_empty(desk_ctx):
    with pytest.raises(ConfigError):
        generate_dataset(0, desk_ctx, 0.1, 0)
    with pytest.raises(DimensionMismatch):
        generate_dataset(2, desk_ctx, 0.1, 0, coeffs=np.zeros((3, 20)))


def test_dataset_roundtrip(tmp_path, desk_ctx):
    ds = generate_dataset(12, desk_ctx, 0.1, 5, role="validation")
    path = tmp_path / "v.dset"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.role == "validation" and back.meta["seed"] == 5
    assert np.array_equal(back.coeffs, ds.coeffs) and np.array_equal(back.noisy, ds.noisy)
    assert path.read_bytes()[:4] == b"DSET"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_dataset(path)


def test_loss_examples():
    assert coef_loss([[3.0, 4.0]], [[0.0, 0.0]]) == 12.5
    assert total_pi_loss(0.2, 0.05, 0.1) == pytest.approx(0.07, abs=1e-15)
    with pytest.raises(ConfigError):
        total_pi_loss(0.2, 0.05, 0.0)
    with pytest.raises(DimensionMismatch):
        coef_loss(np.zeros((2, 3)), np.zeros((2, 4)))


def test_pressure_loss_zero_at_truth(desk_ctx):
    ds = generate_dataset(5, desk_ctx, 0.0, 8)
    loss, seeds = pressure_loss(ds.coeffs, ds.noisy, desk_ctx)
    assert loss < 1e-25 and np.abs(seeds).max() < 1e-12


def test_pressure_loss_gradient(desk_ctx, rng):
    ds = generate_dataset(3, desk_ctx, 0.1, 8)
    k = rng.standard_normal((3, 20))
    loss, seeds, state = pressure_loss(k, ds.noisy, desk_ctx, return_state=True)
    grad = desk_ctx.gradient_batch(state, desk_ctx.obs_seeds(seeds))
    d = rng.standard_normal((3, 20))
    eps = 1e-5
    fd = (pressure_loss(k + eps * d, ds.noisy, desk_ctx)[0] - pressure_loss(k - eps * d, ds.noisy, desk_ctx)[0]) / (2 * eps)
    assert np.sum(grad * d) == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("kind", ["data_driven", "physics_informed"])
def test_weight_gradient_through_simulator(desk_ctx, rng, kind):
    ds = generate_dataset(5, desk_ctx, 0.1, 21)
    params = mlp_init(desk_ctx.n_obs, desk_ctx.n_modes, 4)
    params.weights[-1] *= 0.05  # keep predicted log-permeability O(1)
    cfg = TrainConfig(model_kind=kind)
    loss, _, _, grads = batch_loss_and_grad(params, ds.noisy, ds.coeffs, desk_ctx, cfg)
    dirs = [rng.standard_normal(a.shape) for a in params.arrays()]
    analytic = sum(np.sum(g * d) for g, d in zip(grads.arrays(), dirs))

    def at(eps):
        shifted = MlpParams.from_arrays([a + eps * d for a, d in zip(params.arrays(), dirs)])
        return batch_loss_and_grad(shifted, ds.noisy, ds.coeffs, desk_ctx, cfg)[0]

    eps = 1e-6
    fd = (at(eps) - at(-eps)) / (2 * eps)
    assert analytic == pytest.approx(fd, rel=1e-4)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=4)
    with pytest.raises(ConfigError):
        TrainConfig(model_kind="hybrid")
    with pytest.raises(ConfigError):
        TrainConfig(alpha_coef=0)
    assert TrainConfig().replace(n_iterations=3).n_iterations == 3


@given(st.integers(1, 1200), st.integers(0, 2**32))
def test_epoch_coverage(n, seed):
    stream = _PermutationStream(n, np.random.default_rng(seed))
    first = stream.take(n)
    assert np.array_equal(np.sort(first), np.arange(n))
    second = np.concatenate([stream.take(500) for _ in range(math.ceil(n / 500))])[:n]
    assert np.array_equal(np.sort(second), np.arange(n))


TOY_MAP = np.eye(5) + 0.2 * np.random.default_rng(99).standard_normal((5, 5))


def _linear_toy(n, seed=0):
    a = TOY_MAP
    k = np.random.default_rng(seed).standard_normal((n, 5))
    x = k @ a.T
    return Dataset(k, x, x.copy())


def test_data_driven_linear_toy():
    # oracle: the map is exactly linear and noise free, so least squares reaches zero.
    # The 1e-3 bound is on the loss between network outputs and scaled targets (s*k).
    tr, va = _linear_toy(1000, 0), _linear_toy(200, 1)
    cfg = TrainConfig(n_iterations=100, model_kind="data_driven")
    params, adam, done, best = None, None, 0, np.inf
    while done < 2000:
        params, hist = train(tr, None, cfg, 0, None, params, adam, done)
        adam, done = hist.adam, hist.iteration[-1]
        s = cfg.coef_scale
        best = coef_loss(s * predict_coefficients(params, va.noisy, s), s * va.coeffs)
        if best < 1e-3:
            break
    assert best < 1e-3


def test_pi_from_near_truth(small_ctx):
    tr = generate_dataset(500, small_ctx, 0.0, 1)
    va = generate_dataset(50, small_ctx, 0.0, 2, "validation")
    dd = TrainConfig(n_iterations=60, model_kind="data_driven")
    params, _ = train(tr, va, dd, 0, small_ctx)
    pi = dd.replace(model_kind="physics_informed", n_iterations=50)
    params, hist = train(tr, va, pi, 0, small_ctx, params)
    j = np.array(hist.train_loss)
    bound = pi.alpha_coef * hist.train_coef_loss[0] + hist.train_pres_loss[0]
    assert j[0] == pytest.approx(bound, rel=1e-12)
    windows = j.reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_history_bookkeeping_and_resume(tmp_path, small_ctx):
    tr = generate_dataset(60, small_ctx, 0.1, 1)
    va = generate_dataset(10, small_ctx, 0.1, 2, "validation")
    cfg = TrainConfig(n_iterations=4, batch_size=5, n_batches=4, samples_per_iteration=20,
                      validation_every=2)
    path = tmp_path / "h.csv"
    params, h1 = train(tr, va, cfg, 0, small_ctx, history_path=path)
    for i in range(4):
        assert h1.train_loss[i] == pytest.approx(
            h1.train_pres_loss[i] + cfg.alpha_coef * h1.train_coef_loss[i], abs=1e-12)
    assert h1.validated() == [0, 1, 3]
    _, h2 = train(tr, va, cfg, 0, small_ctx, params, h1.adam, 4, path)
    back = TrainHistory.from_csv(path)
    assert back.iteration == list(range(1, 9))
    assert back.train_loss[:4] == h1.train_loss
    assert h2.adam.t == 32
    assert math.isnan(back.val_coef_loss[2])


def test_training_deterministic(small_ctx):
    tr = generate_dataset(40, small_ctx, 0.1, 1)
    cfg = TrainConfig(n_iterations=2, batch_size=5, n_batches=2, samples_per_iteration=10)
    a, _ = train(tr, None, cfg, 3, small_ctx)
    b, _ = train(tr, None, cfg, 3, small_ctx)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


def test_train_checks(small_ctx):
    tr = generate_dataset(10, small_ctx, 0.1, 1)
    with pytest.raises(ConfigError):
        train(tr, None, TrainConfig(n_iterations=1), 0, None)
    with pytest.raises(DimensionMismatch):
        train(tr, None, TrainConfig(n_iterations=1), 0, small_ctx, mlp_init(3, 6, 0))
