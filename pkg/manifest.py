"""
Dataset ingestion: class schemes, Speech Commands directory trees, JSON-lines
manifests for the derived corpora, and WAV reading.
"""

import json
import logging
import os
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from dsp import SAMPLE_RATE, Waveform
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

BACKGROUND_NOISE_DIR = "_background_noise_"
VALIDATION_LIST = "validation_list.txt"
TESTING_LIST = "testing_list.txt"

GSC_KEYWORDS = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"]
TED_MISSING = {"left", "yes", "stop"}  # fewer than 20 examples in that corpus


class ClassMap(BaseModel):
    """Keywords sorted lexicographically, then Unknown, then Silence"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    scheme_name: str
    keyword_labels: List[str]
    unknown_label: Optional[str] = None
    silence_label: Optional[str] = None

    @field_validator("keyword_labels")
    @classmethod
    def _sorted_keywords(cls, value):
        if not value:
            raise ValueError("keyword_labels must not be empty")
        return sorted(value)

    @model_validator(mode="after")
    def _unique(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"class names must be unique: {self.labels}")
        return self

    @property
    def labels(self) -> List[str]:
        names = list(self.keyword_labels)
        if self.unknown_label:
            names.append(self.unknown_label)
        if self.silence_label:
            names.append(self.silence_label)
        return names

    def __len__(self):
        return len(self.labels)

    def index(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise DataError(f"label '{name}' is not in scheme '{self.scheme_name}' ({self.labels})")

    def name(self, index: int) -> str:
        return self.labels[index]

    @property
    def keyword_indices(self) -> List[int]:
        return list(range(len(self.keyword_labels)))

    @property
    def unknown_index(self) -> Optional[int]:
        return self.labels.index(self.unknown_label) if self.unknown_label else None


SCHEMES: Dict[str, ClassMap] = {
    "gsc12": ClassMap(scheme_name="gsc12", keyword_labels=GSC_KEYWORDS,
                      unknown_label="unknown", silence_label="silence"),
    "libri11": ClassMap(scheme_name="libri11", keyword_labels=GSC_KEYWORDS, unknown_label="unknown"),
    "ted8": ClassMap(scheme_name="ted8", keyword_labels=[k for k in GSC_KEYWORDS if k not in TED_MISSING],
                     unknown_label="unknown"),
}


def get_scheme(name: str) -> ClassMap:
    if name not in SCHEMES:
        raise ConfigError(f"unknown class scheme '{name}' (known: {sorted(SCHEMES)})")
    return SCHEMES[name]


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class Example(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    audio_path: str
    label: int = Field(ge=0)
    split: Split
    duration_s: float = Field(gt=0.0)
    silence: bool = False   # a 1-s crop of a background-noise file
    crop_index: int = 0

    @property
    def key(self) -> str:
        if self.silence:
            return f"{self.audio_path}#silence-{self.split.value}-{self.crop_index}"
        return self.audio_path


class Manifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    examples: List[Example]
    class_map: ClassMap
    sample_rate: int = SAMPLE_RATE

    @model_validator(mode="after")
    def _check(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
        n = len(self.class_map)
        bad = [e.audio_path for e in self.examples if e.label >= n]
        if bad:
            raise ValueError(f"{len(bad)} examples have labels >= {n}, e.g. {bad[0]}")
        return self

    def split(self, name: Union[str, Split]) -> List[Example]:
        name = Split(name)
        return [e for e in self.examples if e.split == name]

    def require_splits(self, *names: str):
        for name in names:
            if not self.split(name):
                raise DataError(f"manifest has no '{Split(name).value}' examples")

    def class_counts(self, split: Union[str, Split]) -> Dict[str, int]:
        counts = {name: 0 for name in self.class_map.labels}
        for e in self.split(split):
            counts[self.class_map.name(e.label)] += 1
        return counts

    def check_partition(self):
        """Train / validation / test are pairwise disjoint by path"""
        seen: Dict[str, Split] = {}
        for e in self.examples:
            previous = seen.setdefault(e.key, e.split)
            if previous != e.split:
                raise DataError(f"{e.key} appears in both {previous.value} and {e.split.value}")


def read_wav(path: Union[str, Path]) -> Waveform:
    """PCM16 mono 16 kHz WAV as float samples in [-1, 1]"""
    try:
        samples, rate = sf.read(str(path), dtype="float32", always_2d=True)
    except RuntimeError as e:
        raise DataError(f"cannot read {path}: {e}")
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if samples.shape[1] != 1:
        raise DataError(f"{path}: {samples.shape[1]} channels, expected mono")
    return Waveform(samples[:, 0], rate)


def write_wav(path: Union[str, Path], w: Waveform):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(w.samples, -1.0, 1.0), w.sample_rate, subtype="PCM_16")


@lru_cache(maxsize=32)
def _read_noise(path: str) -> Waveform:
    return read_wav(path)


def load_example(example: Example, rng: Optional[np.random.Generator] = None) -> Waveform:
    """Audio for one row; silence rows are a random 1-s crop scaled by U(0, 1)"""
    if not example.silence:
        return read_wav(example.audio_path)
    noise = _read_noise(example.audio_path).samples
    length = int(round(example.duration_s * SAMPLE_RATE))
    if rng is None:
        rng = np.random.default_rng(example.crop_index)
    start = int(rng.integers(0, max(len(noise) - length, 0) + 1))
    crop = noise[start:start + length]
    if len(crop) < length:
        crop = np.pad(crop, (0, length - len(crop)))
    return Waveform(crop * rng.uniform(0.0, 1.0), SAMPLE_RATE)


def _read_list(path: Path) -> List[str]:
    if not path.is_file():
        raise ConfigError(f"missing split list {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def build_gsc_manifest(root: Union[str, Path], scheme: ClassMap = SCHEMES["gsc12"]) -> Manifest:
    """
    Speech Commands tree: one directory per word, splits from validation_list.txt
    and testing_list.txt, everything else is train. Words outside the scheme's
    keywords become Unknown. Silence rows are crops of _background_noise_ files,
    as many per split as the mean keyword-class count of that split.
    """
    root = Path(root)
    validation = set(_read_list(root / VALIDATION_LIST))
    testing = set(_read_list(root / TESTING_LIST))
    ambiguous = sorted(validation & testing)
    if ambiguous:
        raise DataError(f"ambiguous split: {len(ambiguous)} files listed for validation and testing, "
                        f"e.g. {ambiguous[0]}")

    class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and not d.name.startswith("_"))
    examples: List[Example] = []
    for class_dir in class_dirs:
        files = sorted(class_dir.glob("*.wav"))
        in_scheme = class_dir.name in scheme.keyword_labels
        if not files:
            logger.warning(f"Class directory {class_dir} is empty")
            if not in_scheme:
                raise DataError(f"empty class directory {class_dir} is not part of scheme '{scheme.scheme_name}'")
            continue
        if in_scheme:
            label = scheme.index(class_dir.name)
        elif scheme.unknown_label:
            label = scheme.index(scheme.unknown_label)
        else:
            continue
        for f in files:
            relative = f"{class_dir.name}/{f.name}"
            if relative in validation:
                split = Split.VALIDATION
            elif relative in testing:
                split = Split.TEST
            else:
                split = Split.TRAIN
            duration = sf.info(str(f)).duration
            examples.append(Example(audio_path=os.path.normpath(str(f.absolute())), label=label,
                                    split=split, duration_s=duration))
    if not examples:
        raise DataError(f"empty dataset: no .wav files under {root}")

    if scheme.silence_label:
        examples.extend(_silence_examples(root, scheme, examples))

    manifest = Manifest(examples=examples, class_map=scheme)
    manifest.check_partition()
    logger.info(f"Built {scheme.scheme_name} manifest from {root}: "
                + ", ".join(f"{s.value}={len(manifest.split(s))}" for s in Split))
    return manifest


def _silence_examples(root: Path, scheme: ClassMap, examples: List[Example]) -> List[Example]:
    noise_dir = root / BACKGROUND_NOISE_DIR
    noise_files = sorted(noise_dir.glob("*.wav")) if noise_dir.is_dir() else []
    if not noise_files:
        logger.warning(f"No background noise under {noise_dir}; '{scheme.silence_label}' has no examples")
        return []
    label = scheme.index(scheme.silence_label)
    keyword_count = len(scheme.keyword_labels)
    rows = []
    for split in Split:
        keyword_labels = [e.label for e in examples if e.split == split and e.label < keyword_count]
        present = len(set(keyword_labels))
        count = int(round(len(keyword_labels) / present)) if present else 0
        for i in range(count):
            path = noise_files[i % len(noise_files)]
            rows.append(Example(audio_path=os.path.normpath(str(path.absolute())), label=label, split=split,
                                duration_s=1.0, silence=True, crop_index=i))
    return rows


def _relative_to(path: str, base: Path) -> str:
    relative = os.path.relpath(path, base)
    return path if relative.startswith("..") else relative


def write_jsonl_manifest(manifest: Manifest, path: Union[str, Path]):
    """Header line with the class map, then one row per example"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.absolute()
    names = manifest.class_map.labels
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"class_map": manifest.class_map.model_dump()}) + "\n")
        for e in manifest.examples:
            row = {"path": _relative_to(e.audio_path, base), "label": names[e.label],
                   "split": e.split.value, "duration_s": e.duration_s}
            if e.silence:
                row["silence"] = True
                row["crop_index"] = e.crop_index
            f.write(json.dumps(row) + "\n")


REQUIRED_FIELDS = ("path", "label", "split", "duration_s")


def load_jsonl_manifest(path: Union[str, Path], scheme: Optional[ClassMap] = None) -> Manifest:
    """
    Rows of {path, label, split, duration_s}; relative paths resolve against the
    manifest's directory. An optional first line {"class_map": {...}} fixes the
    scheme; without it `scheme` (default gsc12) is used.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest {path} does not exist")
    base = path.parent.absolute()
    class_map = scheme
    examples: List[Example] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: malformed JSON ({e.msg})")
            if not isinstance(record, dict):
                raise DataError(f"{path}:{line_no}: expected an object")
            if "class_map" in record and not examples:
                try:
                    class_map = ClassMap(**record["class_map"])
                except (TypeError, ValidationError) as e:
                    raise DataError(f"{path}:{line_no}: invalid class map header ({e})")
                continue
            if class_map is None:
                class_map = SCHEMES["gsc12"]
            missing = [k for k in REQUIRED_FIELDS if k not in record]
            if missing:
                raise DataError(f"{path}:{line_no}: missing field '{missing[0]}'")
            try:
                label = class_map.index(str(record["label"]))
            except DataError as e:
                raise DataError(f"{path}:{line_no}: {e}")
            audio_path = Path(str(record["path"]))
            if not audio_path.is_absolute():
                audio_path = base / audio_path
            try:
                examples.append(Example(audio_path=os.path.normpath(str(audio_path)), label=label,
                                        split=record["split"], duration_s=record["duration_s"],
                                        silence=bool(record.get("silence", False)),
                                        crop_index=int(record.get("crop_index", 0))))
            except ValidationError as e:
                raise DataError(f"{path}:{line_no}: {e.errors()[0]['loc'][0]}: {e.errors()[0]['msg']}")
    if class_map is None:
        class_map = SCHEMES["gsc12"]
    manifest = Manifest(examples=examples, class_map=class_map)
    manifest.check_partition()
    return manifest


@dataclass(frozen=True)
class ClassIntersection:
    class_map: ClassMap
    source_remap: Dict[int, int]   # source index -> evaluation index
    target_remap: Dict[int, int]   # target index -> evaluation index
    unknown_shared: bool

    @property
    def keyword_eval_indices(self) -> List[int]:
        return self.class_map.keyword_indices


def intersect_classes(source: ClassMap, target: ClassMap) -> ClassIntersection:
    """Shared keywords (+ Unknown / Silence when both have them) with index remaps"""
    common = sorted(set(source.keyword_labels) & set(target.keyword_labels))
    if not common:
        raise DataError(f"schemes '{source.scheme_name}' and '{target.scheme_name}' share no keywords")
    unknown = source.unknown_label if source.unknown_label and source.unknown_label == target.unknown_label else None
    silence = source.silence_label if source.silence_label and source.silence_label == target.silence_label else None
    if source == target:
        name = source.scheme_name
    else:
        name = f"{source.scheme_name}&{target.scheme_name}"
    shared = ClassMap(scheme_name=name, keyword_labels=common, unknown_label=unknown, silence_label=silence)
    source_remap = {source.index(n): shared.index(n) for n in shared.labels}
    target_remap = {target.index(n): shared.index(n) for n in shared.labels}
    return ClassIntersection(shared, source_remap, target_remap, unknown is not None)
