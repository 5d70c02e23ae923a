"""
Waveform -> MFCC front-end.

Frames of 480 samples every 160 samples (no centering, no padding), periodic
Hann window, 512-point FFT power spectrum, 40 triangular mel filters between
20 Hz and 8 kHz, natural log with a 1e-10 floor, orthonormal DCT-II over the mel
axis keeping all 40 coefficients.
"""

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000


class FrontendConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sample_rate: int = SAMPLE_RATE
    fft_size: int = Field(512, ge=2)
    window: int = Field(480, ge=1)
    hop: int = Field(160, ge=1)
    n_mels: int = Field(40, ge=1)
    fmin: float = Field(20.0, ge=0.0)
    fmax: float = 8000.0
    log_floor: float = Field(1e-10, gt=0.0)
    clip_seconds: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _check(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
        if self.window > self.fft_size:
            raise ValueError("window longer than the FFT size")
        if not self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need fmin < fmax <= Nyquist")
        return self

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window) // self.hop + 1


DEFAULT_FRONTEND = FrontendConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"waveform sample rate {self.sample_rate} Hz, expected {SAMPLE_RATE}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _samples(w) -> np.ndarray:
    return np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)


def frame_signal(w, window: int = 480, hop: int = 160) -> np.ndarray:
    x = _samples(w)
    if x.shape[0] < window:
        raise DataError(f"signal of {x.shape[0]} samples is shorter than one {window}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop]
    return frames


def stft_power(w, fft_size: int = 512, window: int = 480, hop: int = 160) -> np.ndarray:
    """Power spectrum, shape (fft_size // 2 + 1, T)"""
    frames = frame_signal(w, window, hop) * periodic_hann(window)
    spectrum = np.fft.rfft(frames, n=fft_size, axis=1)
    return (spectrum.real ** 2 + spectrum.imag ** 2).T


@lru_cache(maxsize=8)
def _mel_filterbank(n_mels: int, fmin: float, fmax: float, fft_size: int, sample_rate: int) -> np.ndarray:
    if not fmin < fmax <= sample_rate / 2:
        raise ConfigError(f"mel band [{fmin}, {fmax}] invalid for {sample_rate} Hz")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(bank.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigError(f"{n_mels} mel filters too many for a {fft_size}-point FFT "
                          f"(empty filters {empty.tolist()})")
    bank.setflags(write=False)
    return bank


def mel_filterbank(n_mels: int = 40, fmin: float = 20.0, fmax: float = 8000.0,
                   fft_size: int = 512, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, shape (n_mels, fft_size // 2 + 1)"""
    return _mel_filterbank(int(n_mels), float(fmin), float(fmax), int(fft_size), int(sample_rate))


def mel_centers(n_mels: int = 40, fmin: float = 20.0, fmax: float = 8000.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


@lru_cache(maxsize=8)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix D, so D @ D.T == I"""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    d[0] /= np.sqrt(2.0)
    d.setflags(write=False)
    return d


def log_mel(w, frontend: FrontendConfig = DEFAULT_FRONTEND) -> np.ndarray:
    power = stft_power(w, frontend.fft_size, frontend.window, frontend.hop)
    bank = mel_filterbank(frontend.n_mels, frontend.fmin, frontend.fmax, frontend.fft_size, frontend.sample_rate)
    return np.log(bank @ power + frontend.log_floor)


def mfcc(w, frontend: FrontendConfig = DEFAULT_FRONTEND, dtype=np.float32) -> np.ndarray:
    """Feature map of shape (1, 1, n_mels, T)"""
    coeffs = dct_matrix(frontend.n_mels) @ log_mel(w, frontend)
    if not np.all(np.isfinite(coeffs)):
        raise DataError("non-finite MFCC values (non-finite input samples?)")
    return coeffs[None, None].astype(dtype)


def log_spectrogram(w, frontend: FrontendConfig = DEFAULT_FRONTEND) -> np.ndarray:
    power = stft_power(w, frontend.fft_size, frontend.window, frontend.hop)
    return np.log(power + frontend.log_floor)


def _as_2d(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    while m.ndim > 2:
        if m.shape[0] != 1:
            raise DataError(f"expected a single feature map, got shape {m.shape}")
        m = m[0]
    return m


def mean_spectrogram(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean; narrower maps are right-padded with their own minimum"""
    if len(maps) == 0:
        raise DataError("mean_spectrogram of an empty list")
    maps = [_as_2d(m).astype(np.float64) for m in maps]
    height = maps[0].shape[0]
    if any(m.shape[0] != height for m in maps):
        raise DataError("feature maps differ in height")
    width = max(m.shape[1] for m in maps)
    total = np.zeros((height, width))
    for m in maps:
        padded = np.full((height, width), m.min())
        padded[:, :m.shape[1]] = m
        total += padded
    return total / len(maps)


def save_feature_cache(path: Union[str, Path], feature_map: np.ndarray, frontend: FrontendConfig):
    """Raw little-endian float32 block plus a JSON sidecar with shape and front-end parameters"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(feature_map, dtype="<f4")
    path.write_bytes(data.tobytes())
    sidecar = {"shape": list(data.shape), "dtype": "<f4", "frontend": frontend.model_dump()}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_feature_cache(path: Union[str, Path], frontend: FrontendConfig = None) -> np.ndarray:
    """Read a cached map; returns None when the cache was written with another front-end"""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar_path.exists():
        return None
    sidecar = json.loads(sidecar_path.read_text())
    if frontend is not None and sidecar["frontend"] != frontend.model_dump():
        logger.debug(f"Feature cache {path} built with other front-end parameters; ignoring")
        return None
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    return data.reshape(sidecar["shape"]).astype(np.float32)


def write_pgm(path: Union[str, Path], matrix: np.ndarray):
    """8-bit binary graymap, min..max scaled to 0..255, row 0 (lowest bin) at the bottom"""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DataError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    low, high = m.min(), m.max()
    scaled = np.zeros_like(m) if high == low else (m - low) / (high - low)
    pixels = np.round(255.0 * scaled[::-1]).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
