"""
DSU / PatchDSU / Freq-MixStyle against scalar re-implementations and identities
"""

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from errors import ConfigError
from tensor import Tensor, gradcheck
from uncertainty import (Method, StatPair, UncertaintyConfig, VarianceMode, apply_uncertainty, channel_stats,
                         expectation_identity_check, freq_mixstyle_forward, make_grid, merge_patches,
                         patch_split, patch_stats, sample_reparam, stat_variance)

EPS = 1e-6


def dsu_cfg(**kw):
    return UncertaintyConfig(method="dsu", **kw)


def patch_cfg(k_h, k_w, **kw):
    return UncertaintyConfig(method="patchdsu", k_h=k_h, k_w=k_w, **kw)


def scalar_patch_dsu(x, k_h, k_w, p, rng):
    """Loop-by-loop PatchDSU with the batch-shared variance; k_h = k_w = 1 is DSU"""
    B, C, H, W = x.shape
    ph, pw = -(-H // k_h), -(-W // k_w)
    rows = [(r, min(r + ph, H)) for r in range(0, H, ph)]
    cols = [(c, min(c + pw, W)) for c in range(0, W, pw)]
    gates = rng.random(B) < p
    if not gates.any():
        return x.copy()
    mu = np.zeros((B, C, len(rows), len(cols)))
    sigma = np.zeros_like(mu)
    for b in range(B):
        for c in range(C):
            for i, (r0, r1) in enumerate(rows):
                for j, (c0, c1) in enumerate(cols):
                    patch = x[b, c, r0:r1, c0:c1]
                    mu[b, c, i, j] = patch.mean()
                    sigma[b, c, i, j] = np.sqrt(((patch - patch.mean()) ** 2).mean())
    var_mu = ((mu - mu.mean(axis=0)) ** 2).mean(axis=0)
    var_sigma = ((sigma - sigma.mean(axis=0)) ** 2).mean(axis=0)
    noise_beta = rng.standard_normal(mu.shape)
    noise_gamma = rng.standard_normal(mu.shape)
    out = x.copy()
    for b in range(B):
        if not gates[b]:
            continue
        for c in range(C):
            for i, (r0, r1) in enumerate(rows):
                for j, (c0, c1) in enumerate(cols):
                    beta = mu[b, c, i, j] + noise_beta[b, c, i, j] * np.sqrt(var_mu[c, i, j])
                    gamma = sigma[b, c, i, j] + noise_gamma[b, c, i, j] * np.sqrt(var_sigma[c, i, j])
                    patch = x[b, c, r0:r1, c0:c1]
                    out[b, c, r0:r1, c0:c1] = (patch - mu[b, c, i, j]) / (sigma[b, c, i, j] + EPS) * gamma + beta
    return out


@pytest.mark.parametrize("method", ["dsu", "patchdsu", "freq-mixstyle"])
def test_p_zero_and_eval_mode_are_identity(rng, method):
    for _ in range(100):
        x = rng.standard_normal((4, 3, 8, 10))
        cfg = UncertaintyConfig(method=method, p=0.0, k_h=2, k_w=3)
        assert np.array_equal(apply_uncertainty(x, cfg, rng, training=True).data, x)
        live = cfg.model_copy(update={"p": 1.0})
        assert np.array_equal(apply_uncertainty(x, live, rng, training=False).data, x)


def test_method_none_is_identity(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    assert np.array_equal(apply_uncertainty(x, UncertaintyConfig(), None, training=True).data, x)
    assert np.array_equal(apply_uncertainty(x, None, None, training=True).data, x)


def test_missing_rng_is_a_config_error(rng):
    with pytest.raises(ConfigError):
        apply_uncertainty(rng.standard_normal((2, 1, 4, 4)), dsu_cfg(p=1.0), None, training=True)


def test_dsu_matches_scalar_oracle(rng):
    x = rng.standard_normal((5, 3, 6, 7))
    out = apply_uncertainty(x, dsu_cfg(p=0.6), np.random.default_rng(42), training=True).data
    expected = scalar_patch_dsu(x, 1, 1, 0.6, np.random.default_rng(42))
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-10)


def test_patch_dsu_matches_scalar_oracle(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    out = apply_uncertainty(x, patch_cfg(2, 2, p=0.7), np.random.default_rng(9), training=True).data
    expected = scalar_patch_dsu(x, 2, 2, 0.7, np.random.default_rng(9))
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-10)


def test_patch_dsu_ragged_grid_matches_scalar_oracle(rng):
    x = rng.standard_normal((4, 2, 7, 11))
    out = apply_uncertainty(x, patch_cfg(3, 4, p=1.0), np.random.default_rng(1), training=True).data
    expected = scalar_patch_dsu(x, 3, 4, 1.0, np.random.default_rng(1))
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-10)


def test_single_patch_equals_dsu(rng):
    for seed in range(50):
        x = rng.standard_normal((4, 3, 8, 10))
        a = apply_uncertainty(x, dsu_cfg(p=0.5), np.random.default_rng(seed), training=True).data
        b = apply_uncertainty(x, patch_cfg(1, 1, p=0.5), np.random.default_rng(seed), training=True).data
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_batch_of_one_has_zero_variance(rng, caplog):
    x = rng.standard_normal((1, 2, 5, 6))
    with caplog.at_level(logging.WARNING):
        out = apply_uncertainty(x, dsu_cfg(p=1.0), rng, training=True).data
    np.testing.assert_allclose(out, x, atol=1e-5)


@pytest.mark.parametrize("cfg", [dsu_cfg(p=1.0), patch_cfg(2, 3, p=1.0)], ids=["dsu", "patchdsu"])
def test_identical_examples_collapse_to_identity(rng, cfg):
    x = np.repeat(rng.standard_normal((1, 3, 8, 10)), 4, axis=0)
    out = apply_uncertainty(x, cfg, rng, training=True).data
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=1e-6)


def test_constant_map_stays_finite(rng):
    x = np.ones((3, 2, 4, 4))
    x[1] = 2.0
    out = apply_uncertainty(x, patch_cfg(2, 2, p=1.0), rng, training=True).data
    assert np.all(np.isfinite(out))


@settings(max_examples=100, deadline=None)
@given(height=st.integers(1, 50), width=st.integers(1, 110), data=st.data())
def test_patch_split_merge_round_trip(height, width, data):
    k_h = data.draw(st.integers(1, height))
    k_w = data.draw(st.integers(1, width))
    x = np.arange(2 * height * width, dtype=np.float64).reshape(1, 2, height, width)
    grid, views = patch_split(x, k_h, k_w)
    assert np.array_equal(merge_patches(grid, views), x)
    assert grid.n_rows <= k_h and grid.n_cols <= k_w
    assert sum(grid.row_sizes) == height and sum(grid.col_sizes) == width
    assert all(s <= grid.patch_h for s in grid.row_sizes)


def test_grid_sizes():
    grid = make_grid(40, 98, 7, 3)
    assert grid.patch_h == 6 and grid.row_sizes[-1] == 4
    assert grid.patch_w == 33 and grid.col_sizes == (33, 33, 32)
    small = make_grid(5, 4, 2, 1)
    assert small.row_sizes == (3, 2)
    with pytest.raises(ConfigError):
        make_grid(5, 4, 0, 1)


def test_grid_clamps_oversized_patch_counts(caplog):
    with caplog.at_level(logging.WARNING):
        grid = make_grid(3, 13, 5, 2)
    assert grid.n_rows == 3
    assert "clamping" in caplog.text


def test_channel_stats_example():
    x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    stats = channel_stats(x)
    assert stats.mu.data[0, 0] == pytest.approx(4.0)
    assert stats.sigma.data[0, 0] == pytest.approx(np.sqrt(5.0))


def test_patch_stats_example():
    x = np.array([[1.0, 3.0, 10.0], [5.0, 7.0, 10.0]]).reshape(1, 1, 2, 3)
    stats = patch_stats(x, make_grid(2, 3, 1, 2))
    np.testing.assert_allclose(stats.mu.data[0, 0], [[4.0, 10.0]])
    np.testing.assert_allclose(stats.sigma.data[0, 0], [[np.sqrt(5.0), 0.0]])


def test_stat_variance_modes():
    mu = Tensor(np.array([[1.0], [3.0]]))
    stats = StatPair(mu, mu)
    shared = stat_variance(stats, VarianceMode.BATCH_SHARED)
    np.testing.assert_allclose(shared.var_mu.data, [[1.0]])
    per_example = stat_variance(stats, "per_example")
    np.testing.assert_allclose(per_example.var_mu.data, [[1.0], [1.0]])


def test_sample_reparam():
    center = Tensor(np.linspace(-1, 1, 10))
    same = sample_reparam(center, Tensor(np.zeros(10)), np.random.default_rng(0))
    assert np.array_equal(same.data, center.data)
    draws = sample_reparam(Tensor(np.zeros(100_000)), Tensor(np.full(100_000, 4.0)), np.random.default_rng(1))
    assert np.std(draws.data) == pytest.approx(2.0, abs=0.02)


def test_freq_mixstyle_hand_example():
    x = np.array([[[1.0, 3.0], [2.0, 6.0]], [[5.0, 5.0], [0.0, 4.0]]]).reshape(2, 1, 2, 2)
    cfg = UncertaintyConfig(method="freq-mixstyle", p=1.0, lambda_mix=0.5)
    out = freq_mixstyle_forward(x, cfg, np.random.default_rng(0), True, permutation=np.array([1, 0])).data
    np.testing.assert_allclose(out[0, 0], [[3.0, 4.0], [1.0, 5.0]], atol=1e-5)
    np.testing.assert_allclose(out[1, 0], [[3.5, 3.5], [1.0, 5.0]], atol=1e-5)


def test_freq_mixstyle_identities(rng):
    x = rng.standard_normal((4, 2, 5, 9))
    full = UncertaintyConfig(method="freq-mixstyle", p=1.0, lambda_mix=1.0)
    np.testing.assert_allclose(freq_mixstyle_forward(x, full, rng, True).data, x, atol=1e-4)
    half = UncertaintyConfig(method="freq-mixstyle", p=1.0)
    same = freq_mixstyle_forward(x, half, rng, True, permutation=np.arange(4)).data
    np.testing.assert_allclose(same, x, atol=1e-4)


def test_freq_mixstyle_batch_of_one_passes_through(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    cfg = UncertaintyConfig(method="freq-mixstyle", p=1.0)
    assert np.array_equal(freq_mixstyle_forward(x, cfg, rng, True).data, x)


@pytest.mark.parametrize("cfg", [dsu_cfg(), patch_cfg(2, 3)], ids=["dsu", "patchdsu"])
def test_expectation_is_identity(rng, cfg):
    x = rng.standard_normal((3, 2, 6, 8))
    report = expectation_identity_check(x, cfg, 20_000, np.random.default_rng(5))
    assert report.within_clt_bound()


@pytest.mark.slow
@pytest.mark.parametrize("cfg", [dsu_cfg(), patch_cfg(6, 10)], ids=["dsu", "patchdsu"])
def test_expectation_is_identity_at_full_precision(rng, cfg):
    x = rng.standard_normal((4, 2, 12, 20))
    report = expectation_identity_check(x, cfg, 100_000, np.random.default_rng(6))
    assert report.within_clt_bound()


def test_expectation_check_needs_enough_draws(rng):
    with pytest.raises(ConfigError):
        expectation_identity_check(rng.standard_normal((2, 1, 2, 2)), dsu_cfg(), 100, rng)


@pytest.mark.parametrize("cfg", [
    dsu_cfg(p=1.0, grad_through_variance=True),
    patch_cfg(2, 2, p=1.0, grad_through_variance=True),
    UncertaintyConfig(method="freq-mixstyle", p=1.0, grad_through_variance=True),
], ids=["dsu", "patchdsu", "freq-mixstyle"])
def test_gradients_match_finite_differences(rng, cfg):
    x = rng.standard_normal((3, 2, 4, 5))

    def fn(t):
        return apply_uncertainty(t, cfg, np.random.default_rng(123), training=True)

    assert gradcheck(fn, [x], eps=1e-6, max_checks=40) < 1e-5


def test_presets():
    cfg = UncertaintyConfig(preset="patchdsu-7x3")
    assert cfg.method is Method.PATCHDSU and (cfg.k_h, cfg.k_w) == (7, 3)
    mix = UncertaintyConfig(preset="freq-mixstyle")
    assert mix.p == 0.8 and mix.lambda_mix == 0.5
    assert UncertaintyConfig(preset="dsu", p=0.3).p == 0.3
    assert UncertaintyConfig(**{"method": "freq-mixstyle", "lambda": 0.2}).lambda_mix == 0.2
    with pytest.raises(ValidationError):
        UncertaintyConfig(preset="bogus")
    with pytest.raises(ValidationError):
        UncertaintyConfig(p=1.5)
    assert not UncertaintyConfig(method="dsu", p=0.0).active
