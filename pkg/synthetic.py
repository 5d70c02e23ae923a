"""
Desk-scale synthetic corpora, written as 16 kHz PCM16 WAVs plus a JSON-lines
manifest, so every command can run without downloading a speech corpus.

tones:    2 classes, a pure tone at a random pitch vs white noise
keywords: 3 "keywords" (rising chirp, falling chirp, double pulse) plus an
          Unknown class of random tone bursts; a _background_noise_
          directory with a few noise files for the noise bank
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Union

import numpy as np

import seeding
from dsp import SAMPLE_RATE, Waveform
from manifest import ClassMap, Example, Manifest, Split, write_jsonl_manifest, write_wav

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
TONES_SCHEME = ClassMap(scheme_name="tones", keyword_labels=["noise", "tone"])
KEYWORDS_SCHEME = ClassMap(scheme_name="toy3", keyword_labels=["fall", "pulse", "rise"], unknown_label="unknown")


def _split_for(i: int, n: int) -> Split:
    """Deterministic interleaved split: 70% train, 15% validation, 15% test"""
    position = (i * 7919) % n
    if 100 * position < 70 * n:
        return Split.TRAIN
    if 100 * position < 85 * n:
        return Split.VALIDATION
    return Split.TEST


def _time(n: int) -> np.ndarray:
    return np.arange(n) / SAMPLE_RATE


def _tone(rng: np.random.Generator) -> np.ndarray:
    t = _time(SAMPLE_RATE)
    freq = rng.uniform(300.0, 3000.0)
    x = 0.5 * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return x + 0.01 * rng.standard_normal(len(t))


def _noise(rng: np.random.Generator) -> np.ndarray:
    return 0.3 * rng.standard_normal(SAMPLE_RATE).clip(-3, 3) / 3


def _burst(samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Place a short event at a random onset inside one second of low-level noise"""
    out = 0.005 * rng.standard_normal(SAMPLE_RATE)
    onset = int(rng.integers(0, SAMPLE_RATE - len(samples) + 1))
    envelope = np.hanning(len(samples))
    out[onset:onset + len(samples)] += samples * envelope * rng.uniform(0.3, 0.8)
    return out


def _chirp(f0: float, f1: float, duration: float) -> np.ndarray:
    t = _time(int(duration * SAMPLE_RATE))
    phase = 2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * duration))
    return np.sin(phase)


def _rise(rng):
    return _burst(_chirp(rng.uniform(300, 500), rng.uniform(2000, 2600), rng.uniform(0.4, 0.6)), rng)


def _fall(rng):
    return _burst(_chirp(rng.uniform(2000, 2600), rng.uniform(300, 500), rng.uniform(0.4, 0.6)), rng)


def _pulse(rng):
    freq = rng.uniform(800, 1200)
    beep = np.sin(2 * np.pi * freq * _time(int(0.12 * SAMPLE_RATE)))
    gap = np.zeros(int(rng.uniform(0.08, 0.15) * SAMPLE_RATE))
    return _burst(np.concatenate([beep, gap, beep]), rng)


def _unknown(rng):
    freq = rng.uniform(200, 4000)
    return _burst(np.sin(2 * np.pi * freq * _time(int(rng.uniform(0.2, 0.5) * SAMPLE_RATE))), rng)


def _write_corpus(out_dir: Path, scheme: ClassMap, generators: Dict[str, Callable], n_per_class: int,
                  seed: int) -> Manifest:
    examples: List[Example] = []
    total = n_per_class * len(generators)
    for c, (name, generate) in enumerate(generators.items()):
        for i in range(n_per_class):
            rng = seeding.substream(seed, seeding.SYNTHETIC, c, i)
            path = out_dir / name / f"{name}_{i:04d}.wav"
            write_wav(path, Waveform(np.clip(generate(rng), -1.0, 1.0)))
            examples.append(Example(audio_path=str(path.absolute()), label=scheme.index(name),
                                    split=_split_for(c * n_per_class + i, total), duration_s=1.0))
    manifest = Manifest(examples=examples, class_map=scheme)
    write_jsonl_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info(f"Wrote {len(examples)} synthetic '{scheme.scheme_name}' examples to {out_dir}")
    return manifest


def make_tone_corpus(out_dir: Union[str, Path], n_examples: int = 200, seed: int = 0) -> Manifest:
    out_dir = Path(out_dir)
    return _write_corpus(out_dir, TONES_SCHEME, {"tone": _tone, "noise": _noise}, n_examples // 2, seed)


def make_keyword_corpus(out_dir: Union[str, Path], n_per_class: int = 60, seed: int = 0,
                        n_noise_files: int = 3) -> Manifest:
    out_dir = Path(out_dir)
    generators = {"rise": _rise, "fall": _fall, "pulse": _pulse, "unknown": _unknown}
    manifest = _write_corpus(out_dir, KEYWORDS_SCHEME, generators, n_per_class, seed)
    noise_dir = out_dir / "_background_noise_"
    for k in range(n_noise_files):
        rng = seeding.substream(seed, seeding.SYNTHETIC, 1000 + k)
        # brown-ish noise: integrated white noise, normalized
        x = np.cumsum(rng.standard_normal(3 * SAMPLE_RATE))
        x = x - np.convolve(x, np.ones(400) / 400, mode="same")
        write_wav(noise_dir / f"noise_{k}.wav", Waveform(0.5 * x / np.max(np.abs(x))))
    return manifest
