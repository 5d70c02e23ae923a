"""
Waveform augmentation for training and noise injection for evaluation.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dsp import SAMPLE_RATE, Waveform
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

MAX_TRIM_S = 0.05
MIN_SAMPLES = 480  # one analysis window


class NoiseKind(str, Enum):
    WGN = "wgn"
    BANK = "bank"


class AugmentPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    time_shift_ms: Tuple[float, float] = (-100.0, 100.0)
    noise_prob: float = Field(0.8, ge=0.0, le=1.0)
    trim_enabled: bool = False
    # gain: noise * U(0, background_volume), clipped to [-1, 1] (speech-commands recipe)
    # snr: mixed at an SNR drawn uniformly from snr_range_db
    noise_mode: str = "gain"
    background_volume: float = Field(0.1, ge=0.0)
    snr_range_db: Tuple[float, float] = (-5.0, 20.0)
    noise_dir: Optional[str] = None
    noise_bank: List[Any] = Field(default_factory=list, exclude=True)  # Waveforms, loaded at run time

    @field_validator("noise_mode")
    @classmethod
    def _mode(cls, value):
        if value not in ("gain", "snr"):
            raise ValueError("noise_mode must be 'gain' or 'snr'")
        return value

    @model_validator(mode="after")
    def _symmetric(self):
        low, high = self.time_shift_ms
        if low != -high or high < 0:
            raise ValueError(f"time_shift_ms must be symmetric around 0, got {self.time_shift_ms}")
        if self.snr_range_db[0] > self.snr_range_db[1]:
            raise ValueError("snr_range_db must be (low, high)")
        return self

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(time_shift_ms=(0.0, 0.0), noise_prob=0.0, trim_enabled=False)


class SnrSpec(BaseModel):
    """Evaluation-time noise: kind plus SNR; +inf disables the noise"""
    model_config = ConfigDict(extra="forbid")

    snr_db: float
    noise_kind: NoiseKind = NoiseKind.WGN

    @field_validator("snr_db")
    @classmethod
    def _finite(cls, value):
        if math.isnan(value) or value == -math.inf:
            raise ValueError("snr_db must be finite (or +inf to disable noise)")
        return value

    @property
    def disabled(self) -> bool:
        return math.isinf(self.snr_db)


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def time_shift(w: Waveform, shift_ms: float) -> Waveform:
    """Displace by round(shift_ms * 16) samples, zero-filling the vacated side"""
    n = int(round(shift_ms * w.sample_rate / 1000.0))
    x = w.samples
    out = np.zeros_like(x)
    if n == 0:
        out[:] = x
    elif abs(n) < len(x):
        if n > 0:
            out[n:] = x[:-n]
        else:
            out[:n] = x[-n:]
    return Waveform(out, w.sample_rate)


def trim_edges(w: Waveform, min_samples: int = MIN_SAMPLES) -> Waveform:
    """
    Remove K samples from both ends, K = min(0.05 s, a quarter of the signal),
    so at most half of the recording is trimmed in total.
    """
    if len(w) == 0:
        raise DataError("cannot trim an empty waveform")
    k = min(int(round(MAX_TRIM_S * w.sample_rate)), len(w) // 4)
    trimmed = w.samples[k:len(w) - k]
    if len(trimmed) < min_samples:
        raise DataError(f"trimmed waveform has {len(trimmed)} samples, fewer than one {min_samples}-sample window")
    return Waveform(trimmed.copy(), w.sample_rate)


def fix_length(w: Waveform, n: int) -> Waveform:
    """Right zero-pad or centre-crop to exactly n samples"""
    x = w.samples
    if len(x) == n:
        return w
    if len(x) < n:
        return Waveform(np.pad(x, (0, n - len(x))), w.sample_rate)
    start = (len(x) - n) // 2
    return Waveform(x[start:start + n].copy(), w.sample_rate)


def crop_noise(noise: np.ndarray, length: int, position: float) -> np.ndarray:
    """Loop the noise up to `length`, then take the window at fractional position in [0, 1)"""
    noise = np.asarray(noise)
    if len(noise) == 0:
        raise DataError("empty noise waveform")
    if len(noise) < length:
        noise = np.tile(noise, int(math.ceil(length / len(noise))))
    offset = int(position * (len(noise) - length + 1))
    return noise[offset:offset + length]


def noise_gain(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """a such that 10*log10(P_signal / P_(a*noise)) == snr_db"""
    signal_rms, noise_rms = rms(signal), rms(noise)
    if signal_rms == 0.0:
        raise DataError("undefined SNR: signal is silent")
    if noise_rms == 0.0:
        raise DataError("undefined SNR: noise is silent")
    return (signal_rms / noise_rms) * 10.0 ** (-snr_db / 20.0)


def mix_at_snr(signal: Waveform, noise: Waveform, snr_db: float,
               rng: Optional[np.random.Generator] = None) -> Waveform:
    """signal + a * noise, with the noise looped/cropped at a uniform random offset"""
    position = rng.random() if rng is not None else 0.0
    segment = crop_noise(noise.samples, len(signal), position).astype(np.float64)
    a = noise_gain(signal.samples, segment, snr_db)
    return Waveform(signal.samples.astype(np.float64) + a * segment, signal.sample_rate)


def white_noise(n: int, rng: np.random.Generator) -> Waveform:
    if n <= 0:
        raise DataError("white noise length must be positive")
    return Waveform(rng.standard_normal(n), SAMPLE_RATE)


@dataclass
class PolicyDraw:
    shift_ms: float
    noise_applied: bool
    noise_index: int = -1
    volume: float = 0.0
    snr_db: float = 0.0
    position: float = 0.0


def draw_policy(policy: AugmentPolicy, rng: np.random.Generator) -> PolicyDraw:
    """All random choices of one apply_policy call, in a fixed order"""
    low, high = policy.time_shift_ms
    shift_ms = float(rng.uniform(low, high))
    applied = bool(rng.random() < policy.noise_prob)
    if not applied or not policy.noise_bank:
        return PolicyDraw(shift_ms, False)
    index = int(rng.integers(len(policy.noise_bank)))
    if policy.noise_mode == "gain":
        volume, snr = float(rng.uniform(0.0, policy.background_volume)), 0.0
    else:
        volume, snr = 0.0, float(rng.uniform(*policy.snr_range_db))
    return PolicyDraw(shift_ms, True, index, volume, snr, float(rng.random()))


def apply_policy(w: Waveform, policy: AugmentPolicy, rng: np.random.Generator) -> Waveform:
    """(optional trim) -> time shift -> background noise with probability noise_prob"""
    if policy.trim_enabled:
        w = trim_edges(w)
    draw = draw_policy(policy, rng)
    w = time_shift(w, draw.shift_ms)
    if not draw.noise_applied:
        return w
    noise = crop_noise(policy.noise_bank[draw.noise_index].samples, len(w), draw.position)
    if policy.noise_mode == "gain":
        mixed = np.clip(w.samples + draw.volume * noise, -1.0, 1.0)
        return Waveform(mixed, w.sample_rate)
    if rms(w.samples) == 0.0:
        logger.debug("Skipping SNR noise on a silent clip")
        return w
    a = noise_gain(w.samples, noise, draw.snr_db)
    return Waveform(w.samples.astype(np.float64) + a * noise, w.sample_rate)


def load_noise_bank(directory: Union[str, Path]) -> List[Waveform]:
    """Every .wav under `directory` (sorted, recursive), e.g. MUSAN music or GSC background noise"""
    from manifest import read_wav

    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"noise directory {directory} does not exist")
    files = sorted(directory.rglob("*.wav"))
    if not files:
        raise DataError(f"no .wav files under {directory}")
    bank = [read_wav(f) for f in files]
    logger.info(f"Loaded noise bank of {len(bank)} files ({sum(w.duration_s for w in bank):.1f} s) from {directory}")
    return bank
