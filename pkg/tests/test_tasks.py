import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panp.rng import Rng
from panp.tasks import (
    GPError,
    KernelConfig,
    TaskConfig,
    context_count,
    gp_factor,
    gp_sample,
    make_1d_task,
    make_image_task,
    make_patch_task,
    patchify,
    pixel_grid,
    rbf_kernel,
    split_context_target_patches,
    unpatchify,
)

# -- kernel -----------------------------------------------------------------


def test_rbf_diagonal_is_signal_variance():
    assert rbf_kernel([[0.3]], [[0.3]], KernelConfig()) == pytest.approx(1.0, abs=0)
    assert rbf_kernel([[0.3, 1.0]], [[0.3, 1.0]], KernelConfig(signal_var=2.5))[0, 0] == 2.5


def test_rbf_unit_distance():
    k = rbf_kernel([[0.0, 0.0]], [[0.6, 0.8]], KernelConfig(lengthscale=1.0))[0, 0]
    assert k == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert k == pytest.approx(0.60653, abs=1e-5)


def test_rbf_symmetric(rng):
    x = rng.normal((7, 2))
    k = rbf_kernel(x, x, KernelConfig())
    np.testing.assert_allclose(k, k.T, rtol=0, atol=1e-15)


def test_rbf_dimension_mismatch():
    with pytest.raises(ValueError):
        rbf_kernel(np.zeros((2, 1)), np.zeros((2, 2)), KernelConfig())


@pytest.mark.parametrize(
    "kw", [dict(lengthscale=0.0), dict(signal_var=-1.0), dict(noise_std=-0.1), dict(jitter=0.0)]
)
def test_kernel_config_invariants(kw):
    with pytest.raises(ValueError):
        KernelConfig(**kw)


# -- GP sampling ------------------------------------------------------------


def test_single_point_variance():
    cfg = KernelConfig(noise_std=0.0)
    chol = gp_factor(np.zeros((1, 1)), cfg)
    draws = np.array([gp_sample(np.zeros((1, 1)), cfg, Rng(0, i), factor=chol).clean[0] for i in range(100_000)])
    assert abs(draws.var() - 1.0) < 0.03


def test_two_point_covariance_monte_carlo():
    cfg = KernelConfig(lengthscale=0.3, noise_std=0.0)
    xs = np.array([[0.1], [0.35]])
    chol = gp_factor(xs, cfg)
    r = Rng(3)
    samples = np.array([gp_sample(xs, cfg, r, factor=chol).clean for _ in range(10_000)])
    emp = samples.T @ samples / len(samples)
    expected = rbf_kernel(xs, xs, cfg) + cfg.jitter * np.eye(2)
    np.testing.assert_allclose(emp, expected, rtol=0.05)


def test_noise_free_observations_equal_function():
    fn = gp_sample(np.linspace(0, 1, 5)[:, None], KernelConfig(noise_std=0.0), Rng(1))
    np.testing.assert_array_equal(fn.noisy, fn.clean)


def test_observation_noise_level():
    fn = gp_sample(np.linspace(0, 1, 400)[:, None], KernelConfig(noise_std=0.05), Rng(2))
    assert abs((fn.noisy - fn.clean).std() - 0.05) < 0.006


def test_jitter_escalation_handles_duplicates():
    xs = np.zeros((30, 1))  # rank-one kernel
    chol = gp_factor(xs, KernelConfig(jitter=1e-12))
    assert np.all(np.isfinite(chol))


def test_cholesky_failure_reported(monkeypatch):
    # a negative-definite kernel that no jitter up to 1e-2 can rescue
    monkeypatch.setattr("panp.tasks.rbf_kernel", lambda a, b, c: -np.eye(len(a)))
    with pytest.raises(GPError):
        gp_factor(np.zeros((3, 1)), KernelConfig())


def test_gp_sample_needs_points():
    with pytest.raises(ValueError):
        gp_sample(np.zeros((0, 1)), KernelConfig(), Rng(0))


# -- 1-D tasks --------------------------------------------------------------


def test_fixed_context_count():
    task = make_1d_task(Rng(0), (3, 3), 50)
    assert task.n_context == 3 and task.n_target == 50
    assert set(task.context_idx.tolist()) <= set(range(50))


def test_context_outputs_match_targets():
    task = make_1d_task(Rng(1), (3, 10), 50)
    np.testing.assert_array_equal(task.context_y, task.target_y[task.context_idx])
    np.testing.assert_array_equal(task.context_x, task.target_x[task.context_idx])


def test_1d_task_reproducible():
    a, b = make_1d_task(Rng(5), (3, 10), 50), make_1d_task(Rng(5), (3, 10), 50)
    for field in ("context_x", "context_y", "target_x", "target_y", "context_idx"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()


def test_1d_task_ranges():
    counts = {make_1d_task(Rng(9, i), (3, 10), 50).n_context for i in range(200)}
    assert counts == set(range(3, 11))
    task = make_1d_task(Rng(0), (3, 10), 50, x_range=(-2, 2))
    assert task.target_x.min() >= -2 and task.target_x.max() <= 2


def test_1d_task_bad_range():
    with pytest.raises(ValueError):
        make_1d_task(Rng(0), (5, 3), 50)


# -- images -----------------------------------------------------------------


def test_image_range_and_shape():
    img = make_image_task(Rng(0), 16)
    assert img.shape == (16, 16)
    assert img.min() == 0.0 and img.max() == 1.0


def test_image_autocorrelation_decays():
    def lag_corr(img, lag):
        a, b = img[:, :-lag].ravel(), img[:, lag:].ravel()
        return np.corrcoef(a, b)[0, 1]

    imgs = [make_image_task(Rng(4, i), 16, KernelConfig(lengthscale=0.2)) for i in range(100)]
    lag1 = np.mean([lag_corr(im, 1) for im in imgs])
    lag8 = np.mean([lag_corr(im, 8) for im in imgs])
    assert lag1 > lag8


def test_pixel_grid_unit_square():
    g = pixel_grid(4)
    assert g.shape == (16, 2) and g.min() == 0 and g.max() == 1


# -- patchify ---------------------------------------------------------------


def test_patchify_counts(rng):
    rows, grid = patchify(rng.uniform(0, 1, (16, 16)), 4)
    assert rows.shape == (16, 16) and len(grid) == 16


def test_patchify_row_major_content(rng):
    img = rng.uniform(0, 1, (8, 8))
    rows, grid = patchify(img, 4)
    assert grid == [(0, 0), (0, 1), (1, 0), (1, 1)]
    np.testing.assert_array_equal(rows[1], img[0:4, 4:8].ravel())
    np.testing.assert_array_equal(rows[2], img[4:8, 0:4].ravel())


def test_constant_image_patches_identical():
    rows, _ = patchify(np.full((8, 8), 0.3), 2)
    assert np.all(rows == 0.3)


@pytest.mark.parametrize("S", [8, 16, 32])
@pytest.mark.parametrize("P", [1, 2, 4, 8])
def test_roundtrip_bit_exact(S, P):
    img = Rng(S, P).uniform(0, 1, (S, S))
    rows, grid = patchify(img, P)
    out = unpatchify(rows, grid, P, S)
    assert out.shape == (S, S) and out.tobytes() == img.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 32).flatmap(lambda s: st.tuples(st.just(s), st.sampled_from([p for p in range(1, s + 1) if s % p == 0]))))
def test_roundtrip_any_divisor(sp):
    S, P = sp
    img = Rng(S).uniform(0, 1, (S, S))
    rows, grid = patchify(img, P)
    assert unpatchify(rows, grid, P, S).tobytes() == img.tobytes()


def test_shuffled_patches_reassemble(rng):
    img = rng.uniform(0, 1, (16, 16))
    rows, grid = patchify(img, 4)
    perm = rng.permutation(16)
    out = unpatchify(rows[perm], [grid[i] for i in perm], 4, 16)
    assert out.tobytes() == img.tobytes()


def test_patchify_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((16, 16)), 5)


def test_unpatchify_inconsistent():
    rows, grid = patchify(np.zeros((8, 8)), 2)
    with pytest.raises(ValueError):
        unpatchify(rows[:-1], grid[:-1], 2, 8)


# -- context split ----------------------------------------------------------


def test_full_fraction_contexts_are_targets(rng):
    rows, grid = patchify(rng.uniform(0, 1, (8, 8)), 2)
    task = split_context_target_patches(rows, grid, rng, 1.0)
    assert sorted(task.context_idx.tolist()) == list(range(16))


def test_quarter_fraction_on_16_patches():
    task = make_patch_task(Rng(0), 16, 4, 0.25)
    assert task.n_context == 4 and task.n_target == 16


@pytest.mark.parametrize("n,frac,expected", [(16, 0.1, 2), (16, 0.5, 8), (30, 0.1, 3), (10, 0.3, 3), (7, 1.0, 7)])
def test_context_count_ceiling(n, frac, expected):
    assert context_count(n, frac) == expected


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
def test_context_fraction_bounds(frac):
    with pytest.raises(ValueError):
        context_count(16, frac)


def test_patch_task_reproducible_and_subset():
    a, b = make_patch_task(Rng(3), 16, 4, 0.3), make_patch_task(Rng(3), 16, 4, 0.3)
    assert a.context_idx.tobytes() == b.context_idx.tobytes()
    assert a.target_y.tobytes() == b.target_y.tobytes()
    np.testing.assert_array_equal(a.context_y, a.target_y[a.context_idx])
    assert np.all((a.target_y >= 0) & (a.target_y <= 1))
    assert len(set(a.context_idx.tolist())) == a.n_context


# -- task configuration -----------------------------------------------------


def test_task_config_defaults():
    assert TaskConfig().kernel == KernelConfig()
    assert TaskConfig(kind="1d").kernel.lengthscale == 0.6


def test_task_config_roundtrip():
    cfg = TaskConfig(kind="1d", n_tgt=40, kernel=KernelConfig(lengthscale=0.4))
    assert TaskConfig.from_dict(cfg.to_dict()) == cfg


def test_task_config_sample_fraction_range():
    cfg = TaskConfig()
    counts = [cfg.sample(Rng(0, i), 4).n_context for i in range(100)]
    assert min(counts) >= 2 and max(counts) <= 8


@pytest.mark.parametrize("kw", [dict(kind="video"), dict(ctx_fraction_range=(0.0, 0.5)), dict(side=64)])
def test_task_config_invalid(kw):
    with pytest.raises(ValueError):
        TaskConfig(**kw)
