"""
Feature-statistics perturbation modules: DSU, PatchDSU and Freq-MixStyle.

All three act on a (B, C, H, W) feature map during training only and keep its
shape. DSU renormalizes each example with a mean and deviation sampled around
its own channel statistics, the sampling variance being estimated over the
mini-batch. PatchDSU does the same independently for every tile of a
ceiling-partitioned grid over the frequency x time plane. Freq-MixStyle
normalizes each frequency bin over time and re-styles with a deterministic mix
of the statistics of two batch members.

RNG consumption order (scalar oracles replay it):
    DSU / PatchDSU: B uniforms for the per-example gates; then, only if some
    example is gated, standard normals of shape (B, C, n_rows, n_cols) for the
    mean shift followed by the same shape for the deviation shift. C order, so
    batch-major then channel then patch row then patch column.
    Freq-MixStyle: one uniform for the batch gate; then, if gated, one
    permutation of range(B).
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ConfigError
from tensor import Function, Tensor, no_grad, take, where

logger = logging.getLogger(__name__)


class Method(str, Enum):
    NONE = "none"
    DSU = "dsu"
    PATCHDSU = "patchdsu"
    FREQ_MIXSTYLE = "freq-mixstyle"


class VarianceMode(str, Enum):
    BATCH_SHARED = "batch_shared"   # (1/B) sum_b (mu_b - mean mu)^2, one value per channel/patch
    PER_EXAMPLE = "per_example"     # (mu_b - mean mu)^2, one value per example


# Named configurations used in the experiments
PRESETS = {
    "none": {"method": "none"},
    "dsu": {"method": "dsu"},
    "patchdsu-6x10": {"method": "patchdsu", "k_h": 6, "k_w": 10},
    "patchdsu-7x3": {"method": "patchdsu", "k_h": 7, "k_w": 3},
    "freq-mixstyle": {"method": "freq-mixstyle", "lambda": 0.5, "p": 0.8},
}


class UncertaintyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    method: Method = Method.NONE
    p: float = Field(0.5, ge=0.0, le=1.0)
    k_h: int = Field(6, ge=1)
    k_w: int = Field(10, ge=1)
    lambda_mix: float = Field(0.5, ge=0.0, le=1.0, alias="lambda")
    eps: float = Field(1e-6, gt=0.0)
    variance_mode: VarianceMode = VarianceMode.BATCH_SHARED
    grad_through_variance: bool = False
    preset: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, values):
        if not isinstance(values, dict) or not values.get("preset"):
            return values
        name = values["preset"]
        if name not in PRESETS:
            raise ValueError(f"unknown uncertainty preset '{name}' (known: {sorted(PRESETS)})")
        merged = dict(PRESETS[name])
        if "lambda_mix" in values:
            merged.pop("lambda", None)
        merged.update(values)
        return merged

    @property
    def active(self) -> bool:
        return self.method != Method.NONE and self.p > 0


@dataclass(frozen=True)
class StatPair:
    """Per-(example, channel[, patch]) mean and standard deviation"""
    mu: Tensor
    sigma: Tensor


@dataclass(frozen=True)
class StatVariance:
    """Sampling variances of the statistics; batch_shared keeps a leading axis of 1"""
    var_mu: Tensor
    var_sigma: Tensor
    mode: VarianceMode


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    k_h: int
    k_w: int
    patch_h: int
    patch_w: int
    row_starts: Tuple[int, ...]
    col_starts: Tuple[int, ...]
    row_sizes: Tuple[int, ...]
    col_sizes: Tuple[int, ...]

    @property
    def n_rows(self) -> int:
        return len(self.row_starts)

    @property
    def n_cols(self) -> int:
        return len(self.col_starts)

    @property
    def area(self) -> np.ndarray:
        return np.outer(self.row_sizes, self.col_sizes).astype(np.float64)


_warned = set()


def _warn_once(key, message: str):
    if key not in _warned:
        _warned.add(key)
        logger.warning(message)


def _blocks(length: int, size: int) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    starts = tuple(range(0, length, size))
    sizes = tuple(min(size, length - s) for s in starts)
    return starts, sizes


def make_grid(height: int, width: int, k_h: int, k_w: int) -> PatchGrid:
    """Ceiling partition: patches of ceil(H/k_h) x ceil(W/k_w), trailing ones smaller"""
    if height < 1 or width < 1 or k_h < 1 or k_w < 1:
        raise ConfigError(f"invalid patch grid request H={height} W={width} k_h={k_h} k_w={k_w}")
    if k_h > height or k_w > width:
        _warn_once(("clamp", height, width, k_h, k_w),
                   f"Patch counts ({k_h}, {k_w}) exceed feature map ({height}, {width}); clamping")
        k_h, k_w = min(k_h, height), min(k_w, width)
    patch_h, patch_w = math.ceil(height / k_h), math.ceil(width / k_w)
    row_starts, row_sizes = _blocks(height, patch_h)
    col_starts, col_sizes = _blocks(width, patch_w)
    return PatchGrid(height, width, k_h, k_w, patch_h, patch_w,
                     row_starts, col_starts, row_sizes, col_sizes)


def patch_split(x: Union[np.ndarray, Tensor], k_h: int, k_w: int) -> Tuple[PatchGrid, List[List[np.ndarray]]]:
    """Split a (B, C, H, W) map into a grid of views, row-major"""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    grid = make_grid(data.shape[2], data.shape[3], k_h, k_w)
    views = [[data[:, :, r:r + rh, c:c + cw] for c, cw in zip(grid.col_starts, grid.col_sizes)]
             for r, rh in zip(grid.row_starts, grid.row_sizes)]
    return grid, views


def merge_patches(grid: PatchGrid, views: List[List[np.ndarray]]) -> np.ndarray:
    rows = [np.concatenate(row, axis=3) for row in views]
    merged = np.concatenate(rows, axis=2)
    if merged.shape[2:] != (grid.height, grid.width):
        raise ValueError(f"patches merge to {merged.shape[2:]}, expected {(grid.height, grid.width)}")
    return merged


class PatchMean(Function):
    """(B, C, H, W) -> (B, C, n_rows, n_cols) mean of every patch"""

    def forward(self, x, grid=None):
        self.grid = grid
        sums = np.add.reduceat(x, np.asarray(grid.row_starts), axis=2, dtype=np.float64)
        sums = np.add.reduceat(sums, np.asarray(grid.col_starts), axis=3)
        return (sums / grid.area).astype(x.dtype)

    def backward(self, grad):
        g = grad / self.grid.area.astype(grad.dtype)
        g = np.repeat(g, self.grid.row_sizes, axis=2)
        return (np.repeat(g, self.grid.col_sizes, axis=3),)


class PatchExpand(Function):
    """(B, C, n_rows, n_cols) -> (B, C, H, W), each patch filled with its value"""

    def forward(self, s, grid=None):
        self.grid = grid
        out = np.repeat(s, grid.row_sizes, axis=2)
        return np.repeat(out, grid.col_sizes, axis=3)

    def backward(self, grad):
        sums = np.add.reduceat(grad, np.asarray(self.grid.row_starts), axis=2, dtype=np.float64)
        sums = np.add.reduceat(sums, np.asarray(self.grid.col_starts), axis=3)
        return (sums.astype(grad.dtype),)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def channel_stats(x, keepdims: bool = False) -> StatPair:
    """Mean and biased standard deviation over (H, W) for every (b, c)"""
    x = _as_tensor(x)
    mu = x.mean(axis=(2, 3), keepdims=True)
    sigma = (x - mu).square().mean(axis=(2, 3), keepdims=True).sqrt()
    if keepdims:
        return StatPair(mu, sigma)
    b, c = x.shape[:2]
    return StatPair(mu.reshape(b, c), sigma.reshape(b, c))


def patch_stats(x, grid: PatchGrid) -> StatPair:
    """Mean and biased standard deviation of every patch, shape (B, C, n_rows, n_cols)"""
    x = _as_tensor(x)
    mu = PatchMean.apply(x, grid=grid)
    centered = x - PatchExpand.apply(mu, grid=grid)
    sigma = PatchMean.apply(centered.square(), grid=grid).sqrt()
    return StatPair(mu, sigma)


def stat_variance(stats: StatPair, mode: VarianceMode = VarianceMode.BATCH_SHARED) -> StatVariance:
    mode = VarianceMode(mode)

    def variance(t: Tensor) -> Tensor:
        deviation = (t - t.mean(axis=0, keepdims=True)).square()
        if mode == VarianceMode.BATCH_SHARED:
            return deviation.mean(axis=0, keepdims=True)
        return deviation

    return StatVariance(variance(stats.mu), variance(stats.sigma), mode)


def sample_reparam(center: Tensor, variance: Tensor, rng: np.random.Generator,
                   grad_through_variance: bool = False) -> Tensor:
    """center + eps * sqrt(variance), eps ~ N(0, I) drawn once with center's shape"""
    center = _as_tensor(center)
    variance = _as_tensor(variance)
    noise = rng.standard_normal(center.shape).astype(center.dtype)
    if not grad_through_variance:
        variance = variance.detach()
    return center + Tensor(noise) * variance.sqrt()


def _shift_statistics(x: Tensor, stats: StatPair, expand: Callable[[Tensor], Tensor],
                      cfg: UncertaintyConfig, rng: np.random.Generator) -> Tensor:
    batch = x.shape[0]
    gates = rng.random(batch) < cfg.p
    if not gates.any():
        return x
    if batch == 1:
        _warn_once(("batch1", cfg.method), f"{cfg.method.value}: batch of one, statistic variance is zero")

    source = stats
    if not cfg.grad_through_variance:
        source = StatPair(stats.mu.detach(), stats.sigma.detach())
    variance = stat_variance(source, cfg.variance_mode)
    beta = sample_reparam(stats.mu, variance.var_mu, rng, cfg.grad_through_variance)
    gamma = sample_reparam(stats.sigma, variance.var_sigma, rng, cfg.grad_through_variance)

    normalized = (x - expand(stats.mu)) / (expand(stats.sigma) + cfg.eps)
    shifted = normalized * expand(gamma) + expand(beta)
    if gates.all():
        return shifted
    return where(gates[:, None, None, None], shifted, x)


def dsu_forward(x, cfg: UncertaintyConfig, rng: np.random.Generator, training: bool) -> Tensor:
    x = _as_tensor(x)
    if not training:
        return x
    stats = channel_stats(x, keepdims=True)
    return _shift_statistics(x, stats, lambda t: t, cfg, rng)


def patchdsu_forward(x, cfg: UncertaintyConfig, rng: np.random.Generator, training: bool) -> Tensor:
    x = _as_tensor(x)
    if not training:
        return x
    grid = make_grid(x.shape[2], x.shape[3], cfg.k_h, cfg.k_w)
    stats = patch_stats(x, grid)
    return _shift_statistics(x, stats, lambda t: PatchExpand.apply(t, grid=grid), cfg, rng)


def freq_mixstyle_forward(x, cfg: UncertaintyConfig, rng: np.random.Generator, training: bool,
                          permutation: Optional[np.ndarray] = None) -> Tensor:
    """
    Per-frequency instance normalization re-styled with lambda-mixed statistics.

    Statistics are taken over the time axis for every (b, c, h). With
    grad_through_variance unset they are treated as constants, as MixStyle does.
    `permutation` overrides the drawn batch permutation (the gate is still drawn).
    """
    x = _as_tensor(x)
    if not training:
        return x
    batch = x.shape[0]
    if batch < 2:
        _warn_once(("mixstyle-b1",), "freq-mixstyle: batch of one, passing input through")
        return x
    if rng.random() >= cfg.p:
        return x
    perm = rng.permutation(batch) if permutation is None else np.asarray(permutation)

    mu = x.mean(axis=3, keepdims=True)
    sigma = (x - mu).square().mean(axis=3, keepdims=True).sqrt()
    if not cfg.grad_through_variance:
        mu, sigma = mu.detach(), sigma.detach()

    lam = cfg.lambda_mix
    mixed_mu = mu * lam + take(mu, perm) * (1.0 - lam)
    mixed_sigma = sigma * lam + take(sigma, perm) * (1.0 - lam)
    normalized = (x - mu) / (sigma + cfg.eps)
    return normalized * mixed_sigma + mixed_mu


_FORWARDS = {
    Method.DSU: dsu_forward,
    Method.PATCHDSU: patchdsu_forward,
    Method.FREQ_MIXSTYLE: freq_mixstyle_forward,
}


def apply_uncertainty(x, cfg: Optional[UncertaintyConfig], rng: Optional[np.random.Generator],
                      training: bool) -> Tensor:
    """Dispatch to the configured method; identity for method none or outside training"""
    x = _as_tensor(x)
    if cfg is None or cfg.method == Method.NONE or not training:
        return x
    if rng is None:
        raise ConfigError(f"{cfg.method.value} needs a random generator in training mode")
    return _FORWARDS[cfg.method](x, cfg, rng, training)


@dataclass
class ExpectationReport:
    max_deviation: float
    mean: np.ndarray
    draw_std: np.ndarray
    reference: np.ndarray
    n_draws: int

    def within_clt_bound(self, sigmas: float = 5.0, slack: float = 1e-5) -> bool:
        bound = sigmas * self.draw_std / math.sqrt(self.n_draws) + slack
        return bool(np.all(np.abs(self.mean - self.reference) <= bound))


def expectation_identity_check(x, cfg: UncertaintyConfig, n_draws: int,
                               rng: np.random.Generator) -> ExpectationReport:
    """Monte Carlo mean of method(x) over n_draws with p forced to 1; should be x"""
    if n_draws < 10_000:
        raise ConfigError(f"expectation check needs at least 10^4 draws, got {n_draws}")
    reference = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    cfg = cfg.model_copy(update={"p": 1.0})
    x = Tensor(reference)
    total = np.zeros_like(reference)
    total_sq = np.zeros_like(reference)
    with no_grad():
        for _ in range(n_draws):
            out = apply_uncertainty(x, cfg, rng, training=True).data
            total += out
            total_sq += out * out
    mean = total / n_draws
    draw_std = np.sqrt(np.maximum(total_sq / n_draws - mean * mean, 0.0))
    return ExpectationReport(float(np.max(np.abs(mean - reference))), mean, draw_std, reference, n_draws)
