"""
MFCC front-end against brute-force DFT / filterbank / DCT oracles
"""

import numpy as np
import pytest

from dsp import (DEFAULT_FRONTEND, FrontendConfig, Waveform, dct_matrix, frame_signal, hz_to_mel,
                 load_feature_cache, log_spectrogram, mean_spectrogram, mel_centers, mel_filterbank,
                 mfcc, save_feature_cache, stft_power, write_pgm)
from errors import ConfigError, DataError


def dft_power_oracle(frame):
    """O(N^2) DFT of one periodic-Hann-windowed 480-sample frame, 512-point, first 257 bins"""
    n = np.arange(480)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / 480)
    x = frame * window
    power = np.zeros(257)
    for k in range(257):
        angle = -2 * np.pi * k * n / 512
        re = np.sum(x * np.cos(angle))
        im = np.sum(x * np.sin(angle))
        power[k] = re * re + im * im
    return power


def filterbank_oracle(n_mels=40, fmin=20.0, fmax=8000.0):
    low, high = 2595 * np.log10(1 + fmin / 700), 2595 * np.log10(1 + fmax / 700)
    edges = [700 * (10 ** ((low + (high - low) * i / (n_mels + 1)) / 2595) - 1) for i in range(n_mels + 2)]
    bank = np.zeros((n_mels, 257))
    for m in range(n_mels):
        for k in range(257):
            f = k * 16000 / 512
            rising = (f - edges[m]) / (edges[m + 1] - edges[m])
            falling = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1])
            bank[m, k] = max(0.0, min(rising, falling))
    return bank


def dct_oracle(y):
    n = len(y)
    out = np.zeros(n)
    for k in range(n):
        scale = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
        out[k] = scale * sum(y[i] * np.cos(np.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
    return out


def sine(freq, n=16000, amplitude=0.5):
    return Waveform(amplitude * np.sin(2 * np.pi * freq * np.arange(n) / 16000))


def test_frame_count_and_feature_shape():
    w = sine(440)
    assert frame_signal(w).shape == (98, 480)
    assert stft_power(w).shape == (257, 98)
    assert mfcc(w).shape == (1, 1, 40, 98)
    assert DEFAULT_FRONTEND.n_frames(16000) == 98


def test_too_short_input():
    with pytest.raises(DataError):
        stft_power(np.zeros(479))


def test_zero_input_gives_zero_spectrum():
    assert np.all(stft_power(np.zeros(16000)) == 0.0)


def test_sine_energy_at_expected_bin_and_matches_dft_oracle():
    w = sine(1000)
    power = stft_power(w)
    assert np.all(power.argmax(axis=0) == 32)
    frames = frame_signal(w)
    for t in (0, 37, 97):
        oracle = dft_power_oracle(frames[t])
        assert np.max(np.abs(power[:, t] - oracle)) < 1e-4 * oracle.sum()


def test_white_noise_matches_dft_oracle(rng):
    x = rng.standard_normal(16000) * 0.3
    power = stft_power(x)
    frames = frame_signal(x)
    for t in (3, 60):
        oracle = dft_power_oracle(frames[t])
        assert np.max(np.abs(power[:, t] - oracle)) < 1e-4 * oracle.sum()


def test_mel_scale():
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    centers = mel_centers()
    assert np.all(np.diff(centers) > 0)


def test_filterbank_properties():
    bank = mel_filterbank()
    assert bank.shape == (40, 257)
    assert np.all(bank >= 0)
    assert np.all(bank.sum(axis=1) > 0)
    for row in bank:
        support = np.flatnonzero(row > 0)
        assert np.all(np.diff(support) == 1)
    np.testing.assert_allclose(bank, filterbank_oracle(), rtol=1e-10, atol=1e-12)


def test_too_many_mel_filters():
    with pytest.raises(ConfigError):
        mel_filterbank(n_mels=200)


def test_dct_is_orthonormal():
    d = dct_matrix(40)
    np.testing.assert_allclose(d @ d.T, np.eye(40), atol=1e-12)


def test_mfcc_matches_independent_oracle(rng):
    x = rng.standard_normal(16000)
    features = mfcc(x, dtype=np.float64)[0, 0]
    frames = frame_signal(x)
    bank = filterbank_oracle()
    for t in (0, 49, 97):
        log_mel = np.log(bank @ dft_power_oracle(frames[t]) + 1e-10)
        np.testing.assert_allclose(features[:, t], dct_oracle(log_mel), rtol=1e-5, atol=1e-6)


def test_white_noise_energy_sits_in_coefficient_zero(rng):
    features = mfcc(rng.standard_normal(16000), dtype=np.float64)[0, 0]
    energy = features ** 2
    assert np.mean(energy[0] / energy.sum(axis=0)) > 0.8


def test_mfcc_is_deterministic():
    a, b = mfcc(sine(523.0)), mfcc(sine(523.0))
    assert np.array_equal(a, b)


def test_one_hop_shift_moves_mfcc_by_one_frame(rng):
    x = rng.standard_normal(16000)
    full = mfcc(x, dtype=np.float64)[0, 0]
    shifted = mfcc(x[160:], dtype=np.float64)[0, 0]
    assert shifted.shape[1] == full.shape[1] - 1
    np.testing.assert_allclose(shifted, full[:, 1:], rtol=0, atol=1e-10)


def test_log_spectrogram_shape():
    assert log_spectrogram(sine(300)).shape == (257, 98)


def test_mean_spectrogram(rng):
    a = rng.standard_normal((40, 98))
    b = rng.standard_normal((40, 98))
    np.testing.assert_array_equal(mean_spectrogram([a]), a)
    np.testing.assert_allclose(mean_spectrogram([a, b]), (a + b) / 2)
    maps = [rng.standard_normal((40, 98)) for _ in range(10)]
    expected = np.zeros((40, 98))
    for m in maps:
        expected += m
    np.testing.assert_array_equal(mean_spectrogram(maps), expected / 10)
    with pytest.raises(DataError):
        mean_spectrogram([])


def test_mean_spectrogram_pads_with_map_minimum():
    short = np.array([[1.0, 2.0]])
    long = np.array([[3.0, 3.0, 3.0]])
    np.testing.assert_allclose(mean_spectrogram([short, long]), [[2.0, 2.5, 2.0]])


def test_feature_cache_round_trip(tmp_path):
    features = mfcc(sine(880))
    save_feature_cache(tmp_path / "x.f32", features, DEFAULT_FRONTEND)
    np.testing.assert_array_equal(load_feature_cache(tmp_path / "x.f32", DEFAULT_FRONTEND), features)
    other = FrontendConfig(n_mels=32)
    assert load_feature_cache(tmp_path / "x.f32", other) is None
    assert load_feature_cache(tmp_path / "missing.f32") is None


def test_write_pgm(tmp_path):
    write_pgm(tmp_path / "m.pgm", np.arange(6.0).reshape(2, 3))
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    pixels = np.frombuffer(raw[len(b"P5\n3 2\n255\n"):], dtype=np.uint8)
    # lowest row of the matrix is drawn last
    assert pixels.tolist() == [153, 204, 255, 0, 51, 102]
