import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dsp import Waveform
from manifest import write_wav
from nn import ModelSpec

# Small enough for finite differences and seconds-long training runs
TINY_SPEC = ModelSpec(n_layers=3, channels=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tone_corpus(tmp_path_factory):
    """(directory, Manifest) of the 200-clip tones-vs-noise corpus"""
    from synthetic import make_tone_corpus

    out = tmp_path_factory.mktemp("tones")
    return out, make_tone_corpus(out, n_examples=200, seed=0)


@pytest.fixture(scope="session")
def keyword_corpus(tmp_path_factory):
    from synthetic import make_keyword_corpus

    out = tmp_path_factory.mktemp("keywords")
    return out, make_keyword_corpus(out, n_per_class=20, seed=0)


@pytest.fixture
def gsc_tree(tmp_path):
    """Miniature Speech Commands layout: two keywords, one filler word, background noise"""
    rng = np.random.default_rng(0)
    root = tmp_path / "gsc"
    for word, n in {"yes": 4, "no": 4, "cat": 3}.items():
        for i in range(n):
            write_wav(root / word / f"{i:03d}_nohash_0.wav", Waveform(0.1 * rng.standard_normal(16000)))
    write_wav(root / "_background_noise_" / "white_noise.wav", Waveform(0.1 * rng.standard_normal(48000)))
    (root / "validation_list.txt").write_text("yes/000_nohash_0.wav\nno/000_nohash_0.wav\ncat/000_nohash_0.wav\n")
    (root / "testing_list.txt").write_text("yes/001_nohash_0.wav\nno/001_nohash_0.wav\ncat/001_nohash_0.wav\n")
    return root
