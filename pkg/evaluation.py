"""
Metrics and evaluation protocols: macro F1, noisy / time-shifted test
evaluation, keywords-only cross-corpus F1, SNR sweeps and the application
probability ablation.
"""

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.metrics import confusion_matrix

import seeding
from augment import NoiseKind, SnrSpec, fix_length, mix_at_snr, rms, time_shift, trim_edges, white_noise
from dsp import DEFAULT_FRONTEND, FrontendConfig, Waveform, load_feature_cache, mfcc, save_feature_cache
from errors import ConfigError, DataError
from manifest import ClassIntersection, ClassMap, Example, Manifest, intersect_classes, load_example
from nn import ResNet15, predict_logits

logger = logging.getLogger(__name__)

SHIFT_RANGE_MS = 100.0
RESULT_COLUMNS = ["method", "p", "dataset", "condition", "snr_db", "shifted", "seed", "macro_f1", "per_class_f1"]


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        for counts in (self.tp, self.fp, self.fn):
            if np.any(counts < 0):
                raise DataError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int) -> "ConfusionCounts":
        """Per-class counts; predictions outside range(n_classes) only add false negatives"""
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        # an extra bucket collects rejected predictions
        labels = list(range(n_classes + 1))
        y_pred = np.where((y_pred < 0) | (y_pred >= n_classes), n_classes, y_pred)
        matrix = confusion_matrix(y_true, y_pred, labels=labels)
        tp = np.diag(matrix)[:n_classes].copy()
        fn = matrix[:n_classes].sum(axis=1) - tp
        fp = matrix[:, :n_classes].sum(axis=0) - tp
        return cls(tp, fp, fn, matrix[:n_classes, :n_classes])

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def n_examples(self) -> int:
        return int(self.tp.sum() + self.fn.sum())

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn

    def per_class_f1(self) -> np.ndarray:
        """2TP / (2TP + FP + FN) per class, NaN where the class has no support"""
        denominator = 2 * self.tp + self.fp + self.fn
        with np.errstate(divide="ignore", invalid="ignore"):
            f1 = np.where(denominator > 0, 2.0 * self.tp / np.maximum(denominator, 1), 0.0)
        return np.where(self.support > 0, f1, np.nan)


def macro_f1(counts: ConfusionCounts) -> float:
    """Unweighted mean F1 over classes with support, as a percentage"""
    supported = counts.support > 0
    if not np.any(supported):
        raise DataError("macro F1 undefined: no class has any examples")
    return float(100.0 * np.mean(counts.per_class_f1()[supported]))


def format_f1(value: float) -> str:
    return f"{value:.2f}"


def format_mean_std(values: Sequence[float]) -> str:
    """'91.20±0.40' (sample standard deviation; 0 for a single value)"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("no values to summarize")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return f"{values.mean():.2f}±{std:.2f}"


class SweepSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    noise_kinds: List[NoiseKind] = [NoiseKind.WGN]
    snr_db: List[float] = [20.0, 10.0, 5.0, 0.0, -5.0]
    time_shift_eval: bool = False
    n_seeds: int = Field(1, ge=1)
    # eval: one model, evaluation noise reseeded per seed; train: one model trained per seed
    seed_mode: str = "eval"
    split: str = "test"
    batch_size: int = Field(100, ge=1)
    p_grid: List[float] = [round(0.1 * i, 1) for i in range(1, 11)]

    @field_validator("snr_db", "noise_kinds", "p_grid")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("grid must not be empty")
        return value

    @field_validator("p_grid")
    @classmethod
    def _probabilities(cls, value):
        if any(not 0.0 <= p <= 1.0 for p in value):
            raise ValueError("p_grid values must lie in [0, 1]")
        return value

    @field_validator("seed_mode")
    @classmethod
    def _seed_mode(cls, value):
        if value not in ("eval", "train"):
            raise ValueError("seed_mode must be 'eval' or 'train'")
        return value


@dataclass
class EvalResult:
    macro_f1: float
    per_class_f1: Dict[str, float]
    counts: ConfusionCounts
    logits: np.ndarray = field(repr=False, default=None)

    @property
    def n_examples(self) -> int:
        return self.counts.n_examples


@dataclass
class EvalConditions:
    """Everything that perturbs test audio; +inf SNR (or no noise) means clean"""
    noise: Optional[SnrSpec] = None
    time_shift: bool = False
    trim: bool = False
    noise_bank: Sequence[Waveform] = ()

    @property
    def noisy(self) -> bool:
        return self.noise is not None and not self.noise.disabled

    @property
    def clean(self) -> bool:
        return not self.noisy and not self.time_shift and not self.trim


def _perturb(w: Waveform, example_index: int, conditions: EvalConditions, seed: int,
             clip_samples: int) -> Waveform:
    if conditions.trim:
        w = trim_edges(w)
    if conditions.time_shift:
        shift_rng = seeding.substream(seed, seeding.EVAL, seeding.condition_id("shift"), example_index)
        w = time_shift(w, float(shift_rng.uniform(-SHIFT_RANGE_MS, SHIFT_RANGE_MS)))
    w = fix_length(w, clip_samples)
    if not conditions.noisy:
        return w
    if rms(w.samples) == 0.0:
        logger.debug(f"Example {example_index} is silent; no noise mixed")
        return w
    spec = conditions.noise
    rng = seeding.substream(seed, seeding.EVAL, seeding.condition_id(spec.noise_kind.value), example_index)
    if spec.noise_kind == NoiseKind.WGN:
        noise = white_noise(len(w), rng)
    else:
        if not conditions.noise_bank:
            raise ConfigError("bank noise requested but no noise bank is loaded")
        noise = conditions.noise_bank[int(rng.integers(len(conditions.noise_bank)))]
    return mix_at_snr(w, noise, spec.snr_db, rng)


def _cache_file(cache_dir: Union[str, Path], example: Example) -> Path:
    digest = hashlib.sha1(example.key.encode("utf-8")).hexdigest()
    return Path(cache_dir) / digest[:2] / f"{digest}.f32"


def featurize_for_eval(example: Example, example_index: int, conditions: EvalConditions, seed: int,
                       frontend: FrontendConfig = DEFAULT_FRONTEND,
                       cache_dir: Optional[Union[str, Path]] = None) -> np.ndarray:
    """(1, H, W) feature map of one test example under the given conditions"""
    # silence crops depend on the eval seed, so only fixed audio is cached
    use_cache = cache_dir is not None and conditions.clean and not example.silence
    if use_cache:
        cached = load_feature_cache(_cache_file(cache_dir, example), frontend)
        if cached is not None:
            return cached[0]
    w = load_example(example, seeding.substream(seed, seeding.SILENCE, example_index))
    w = _perturb(w, example_index, conditions, seed, frontend.clip_samples)
    features = mfcc(w, frontend)
    if use_cache:
        save_feature_cache(_cache_file(cache_dir, example), features, frontend)
    return features[0]


def featurize_examples(examples: Sequence[Example], conditions: EvalConditions, seed: int,
                       frontend: FrontendConfig = DEFAULT_FRONTEND, cache_dir=None,
                       max_workers: int = 1, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Stack of (N, 1, H, W) maps; example i is perturbed with substreams keyed on indices[i]"""
    indices = list(range(len(examples))) if indices is None else list(indices)
    if not examples:
        raise DataError("no examples to evaluate")

    def one(item):
        example, index = item
        return featurize_for_eval(example, index, conditions, seed, frontend, cache_dir)

    items = list(zip(examples, indices))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            maps = list(pool.map(one, items))
    else:
        maps = [one(item) for item in items]
    return np.stack(maps)


def evaluate(model: ResNet15, manifest: Manifest, split: str = "test", noise: Optional[SnrSpec] = None,
             time_shift: bool = False, seed: int = 0, frontend: FrontendConfig = DEFAULT_FRONTEND,
             noise_bank: Sequence[Waveform] = (), trim: bool = False, batch_size: int = 100,
             cache_dir=None, max_workers: int = 1) -> EvalResult:
    """Macro and per-class F1 of `model` on one split, optionally shifted and/or noisy"""
    if model.n_classes != len(manifest.class_map):
        raise DataError(f"model has {model.n_classes} outputs but the manifest has "
                        f"{len(manifest.class_map)} classes")
    examples = manifest.split(split)
    conditions = EvalConditions(noise, time_shift, trim and time_shift, noise_bank)
    features = featurize_examples(examples, conditions, seed, frontend, cache_dir, max_workers)
    logits = predict_logits(model, features, batch_size)
    labels = np.array([e.label for e in examples])
    counts = ConfusionCounts.from_predictions(labels, logits.argmax(axis=1), model.n_classes)
    return _result(counts, manifest.class_map.labels, logits)


def _result(counts: ConfusionCounts, names: List[str], logits: np.ndarray = None) -> EvalResult:
    per_class = counts.per_class_f1()
    return EvalResult(
        macro_f1=macro_f1(counts),
        per_class_f1={name: round(100.0 * float(v), 4) for name, v in zip(names, per_class) if not math.isnan(v)},
        counts=counts,
        logits=logits,
    )


def keyword_predictions(logits: np.ndarray, source: ClassMap, intersection: ClassIntersection) -> np.ndarray:
    """
    Evaluation-space predictions from source-model logits. Classes outside the
    intersection are masked to -inf, except the source Unknown class, which
    stays selectable and maps to -1 (always an error on a keyword example).
    """
    logits = np.asarray(logits, dtype=np.float64)
    allowed = set(intersection.source_remap)
    if source.unknown_index is not None:
        allowed.add(source.unknown_index)
    mask = np.full(logits.shape[1], -np.inf)
    mask[sorted(allowed)] = 0.0
    predicted = (logits + mask).argmax(axis=1)
    keywords = set(intersection.keyword_eval_indices)
    remap = {s: e for s, e in intersection.source_remap.items() if e in keywords}
    return np.array([remap.get(int(p), -1) for p in predicted], dtype=np.int64)


def keywords_f1(model: ResNet15, manifest: Manifest, intersection: ClassIntersection,
                source: ClassMap, split: str = "test", noise: Optional[SnrSpec] = None,
                time_shift: bool = False, seed: int = 0, frontend: FrontendConfig = DEFAULT_FRONTEND,
                noise_bank: Sequence[Waveform] = (), trim: bool = False, batch_size: int = 100,
                max_workers: int = 1) -> EvalResult:
    """Macro F1 over test examples whose label is a shared keyword"""
    if model.n_classes != len(source):
        raise DataError(f"model has {model.n_classes} outputs, source scheme has {len(source)}")
    keywords = set(intersection.keyword_eval_indices)
    indexed = [(i, e) for i, e in enumerate(manifest.split(split))
               if intersection.target_remap.get(e.label) in keywords]
    if not indexed:
        raise DataError(f"no '{split}' examples carry a shared keyword label")
    indices, examples = zip(*indexed)
    conditions = EvalConditions(noise, time_shift, trim and time_shift, noise_bank)
    features = featurize_examples(examples, conditions, seed, frontend, None, max_workers, indices)
    logits = predict_logits(model, features, batch_size)
    labels = np.array([intersection.target_remap[e.label] for e in examples])
    predicted = keyword_predictions(logits, source, intersection)
    counts = ConfusionCounts.from_predictions(labels, predicted, len(intersection.class_map))
    return _result(counts, intersection.class_map.labels, logits)


def cross_domain_eval(model: ResNet15, source: ClassMap, manifest: Manifest, seed: int = 0,
                      frontend: FrontendConfig = DEFAULT_FRONTEND, noise_bank: Sequence[Waveform] = (),
                      trim: bool = False, batch_size: int = 100, max_workers: int = 1) -> Dict[str, float]:
    """Out-of-domain test results of a model trained on `source` against another corpus"""
    intersection = intersect_classes(source, manifest.class_map)
    results: Dict[str, float] = {}
    if source == manifest.class_map:
        results["full"] = evaluate(model, manifest, seed=seed, frontend=frontend, batch_size=batch_size,
                                   max_workers=max_workers).macro_f1
    common = dict(seed=seed, frontend=frontend, noise_bank=noise_bank, batch_size=batch_size,
                  max_workers=max_workers)
    results["keywords"] = keywords_f1(model, manifest, intersection, source, **common).macro_f1
    results["keywords_shifted"] = keywords_f1(model, manifest, intersection, source, time_shift=True,
                                              trim=trim, **common).macro_f1
    results["keywords_wgn_-5"] = keywords_f1(model, manifest, intersection, source,
                                             noise=SnrSpec(snr_db=-5.0), **common).macro_f1
    if noise_bank:
        results["keywords_bank_-5"] = keywords_f1(model, manifest, intersection, source,
                                                  noise=SnrSpec(snr_db=-5.0, noise_kind=NoiseKind.BANK),
                                                  **common).macro_f1
    for name, value in results.items():
        logger.info(f"{source.scheme_name} -> {manifest.class_map.scheme_name} {name}: {format_f1(value)}")
    return results


class ResultRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: str
    p: float
    dataset: str
    condition: str
    snr_db: Optional[float] = None
    shifted: bool = False
    seed: int
    macro_f1: float
    per_class_f1: Dict[str, float] = {}

    def csv_row(self) -> Dict[str, str]:
        return {
            "method": self.method,
            "p": repr(self.p),
            "dataset": self.dataset,
            "condition": self.condition,
            "snr_db": "" if self.snr_db is None else repr(self.snr_db),
            "shifted": str(self.shifted).lower(),
            "seed": str(self.seed),
            "macro_f1": format_f1(self.macro_f1),
            "per_class_f1": json.dumps(self.per_class_f1, sort_keys=True),
        }


def write_results_csv(rows: Sequence[ResultRow], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.csv_row())


def summarize(rows: Sequence[ResultRow]) -> List[Dict[str, str]]:
    """mean±std of macro F1 over seeds for every (method, p, dataset, condition, snr, shift)"""
    groups: Dict[Tuple, List[float]] = {}
    for row in rows:
        key = (row.method, row.p, row.dataset, row.condition, row.snr_db, row.shifted)
        groups.setdefault(key, []).append(row.macro_f1)
    summary = []
    for (method, p, dataset, condition, snr, shifted), values in groups.items():
        summary.append({
            "method": method, "p": repr(p), "dataset": dataset, "condition": condition,
            "snr_db": "" if snr is None else repr(snr), "shifted": str(shifted).lower(),
            "n": str(len(values)), "macro_f1": format_mean_std(values),
        })
    return summary


def write_summary_csv(rows: Sequence[ResultRow], path: Union[str, Path]):
    summary = summarize(rows)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["method", "p", "dataset", "condition", "snr_db",
                                               "shifted", "n", "macro_f1"])
        writer.writeheader()
        writer.writerows(summary)


def sweep(models: Sequence[Tuple[int, ResNet15]], manifest: Manifest, spec: SweepSpec, method: str,
          p: float, dataset: str, frontend: FrontendConfig = DEFAULT_FRONTEND,
          noise_bank: Sequence[Waveform] = (), trim: bool = False, max_workers: int = 1) -> List[ResultRow]:
    """
    One row per (noise kind, SNR, shift flag, seed). `models` pairs a seed with a
    model: a single pair in eval seed mode is re-evaluated under n_seeds
    evaluation seeds; in train seed mode each pair is one independently
    trained model.
    """
    if not models:
        raise ConfigError("sweep needs at least one model")
    if spec.seed_mode == "eval":
        base_seed, model = models[0]
        runs = [(base_seed + k, model) for k in range(spec.n_seeds)]
    else:
        runs = list(models)
    shifts = [False, True] if spec.time_shift_eval else [False]

    rows: List[ResultRow] = []
    for kind in spec.noise_kinds:
        for snr in spec.snr_db:
            for shifted in shifts:
                for seed, model in runs:
                    noise = SnrSpec(snr_db=snr, noise_kind=kind)
                    result = evaluate(model, manifest, spec.split, noise=noise, time_shift=shifted, seed=seed,
                                      frontend=frontend, noise_bank=noise_bank, trim=trim,
                                      batch_size=spec.batch_size, max_workers=max_workers)
                    condition = "clean" if noise.disabled else kind.value
                    rows.append(ResultRow(method=method, p=p, dataset=dataset, condition=condition,
                                          snr_db=snr, shifted=shifted, seed=seed, macro_f1=result.macro_f1,
                                          per_class_f1=result.per_class_f1))
                    logger.info(f"{method} {condition} {snr:g} dB{' shifted' if shifted else ''} "
                                f"seed {seed}: macro F1 {format_f1(result.macro_f1)}")
    return rows


ABLATION_COLUMNS = ["p", "seed", "clean_macro_f1", "shifted_macro_f1"]


def ablate_p(manifest: Manifest, experiment, p_grid: Sequence[float], run_dir: Optional[Union[str, Path]] = None,
             noise_bank: Sequence[Waveform] = (), max_workers: int = 1) -> List[Dict[str, str]]:
    """
    Train one model per application probability and evaluate it clean and
    time-shifted on the test split. `experiment` is an ExperimentConfig.
    """
    from nn import build_resnet15
    from train import fit

    if any(not 0.0 <= p <= 1.0 for p in p_grid):
        raise ConfigError("p grid values must lie in [0, 1]")
    rows = []
    for i, p in enumerate(p_grid):
        uncertainty = experiment.uncertainty.model_copy(update={"p": float(p)})
        model = build_resnet15(experiment.model, len(manifest.class_map),
                               seeding.substream(experiment.seed, seeding.INIT))
        p_dir = Path(run_dir) / f"p{i:02d}_{p:g}" if run_dir is not None else None
        fit(manifest, model, experiment.train, experiment.augment, uncertainty, experiment.frontend,
            experiment.seed, run_dir=p_dir, max_workers=max_workers)
        clean = evaluate(model, manifest, seed=experiment.seed, frontend=experiment.frontend,
                         max_workers=max_workers)
        shifted = evaluate(model, manifest, time_shift=True, seed=experiment.seed,
                           frontend=experiment.frontend, trim=experiment.augment.trim_enabled,
                           max_workers=max_workers)
        logger.info(f"p={p:g}: clean {format_f1(clean.macro_f1)}, shifted {format_f1(shifted.macro_f1)}")
        rows.append({"p": repr(float(p)), "seed": str(experiment.seed),
                     "clean_macro_f1": format_f1(clean.macro_f1),
                     "shifted_macro_f1": format_f1(shifted.macro_f1)})
    return rows


def write_ablation_csv(rows: Sequence[Dict[str, str]], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


class TrendRow(BaseModel):
    seed: int
    baseline_macro_f1: float
    method_macro_f1: float

    @property
    def method_wins(self) -> bool:
        return self.method_macro_f1 >= self.baseline_macro_f1


class TrendReport(BaseModel):
    method: str
    condition: str
    rows: List[TrendRow]

    @property
    def wins(self) -> int:
        return sum(r.method_wins for r in self.rows)

    @property
    def holds(self) -> bool:
        """The method matches or beats the baseline on at least two thirds of the seeds"""
        return 3 * self.wins >= 2 * len(self.rows)


TREND_COLUMNS = ["seed", "baseline_macro_f1", "method_macro_f1", "method_wins"]


def trend_check(manifest: Manifest, experiment, seeds: Sequence[int] = (0, 1, 2), snr_db: float = -5.0,
                noise_kind: NoiseKind = NoiseKind.WGN, run_dir: Optional[Union[str, Path]] = None,
                noise_bank: Sequence[Waveform] = (), max_workers: int = 1) -> TrendReport:
    """
    Train a baseline and the configured uncertainty method per seed and compare
    them under one noisy condition. The outcome is reported, never raised.
    """
    from nn import build_resnet15
    from train import fit
    from uncertainty import Method, UncertaintyConfig

    if experiment.uncertainty.method == Method.NONE:
        raise ConfigError("trend check needs an uncertainty method to compare against the baseline")
    if not seeds:
        raise ConfigError("trend check needs at least one seed")
    noise = SnrSpec(snr_db=snr_db, noise_kind=noise_kind)
    contenders = {"baseline": UncertaintyConfig(), "method": experiment.uncertainty}

    rows = []
    for seed in seeds:
        scores = {}
        for name, uncertainty in contenders.items():
            model = build_resnet15(experiment.model, len(manifest.class_map), seeding.substream(seed, seeding.INIT))
            seed_dir = Path(run_dir) / f"seed{seed}_{name}" if run_dir is not None else None
            fit(manifest, model, experiment.train, experiment.augment, uncertainty, experiment.frontend,
                seed, run_dir=seed_dir, max_workers=max_workers)
            scores[name] = evaluate(model, manifest, noise=noise, seed=seed, frontend=experiment.frontend,
                                    noise_bank=noise_bank, max_workers=max_workers).macro_f1
        row = TrendRow(seed=seed, baseline_macro_f1=scores["baseline"], method_macro_f1=scores["method"])
        logger.info(f"seed {seed}: baseline {format_f1(row.baseline_macro_f1)}, "
                    f"{experiment.uncertainty.method.value} {format_f1(row.method_macro_f1)}")
        rows.append(row)

    report = TrendReport(method=experiment.uncertainty.method.value,
                         condition=f"{noise_kind.value}@{snr_db:g}dB", rows=rows)
    if report.holds:
        logger.info(f"✅ {report.method} >= baseline on {report.wins}/{len(rows)} seeds under {report.condition}")
    else:
        logger.warning(f"⚠️ {report.method} >= baseline on only {report.wins}/{len(rows)} seeds "
                       f"under {report.condition}")
    return report


def write_trend_csv(report: TrendReport, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=TREND_COLUMNS)
        writer.writeheader()
        for r in report.rows:
            writer.writerow({"seed": str(r.seed), "baseline_macro_f1": format_f1(r.baseline_macro_f1),
                             "method_macro_f1": format_f1(r.method_macro_f1),
                             "method_wins": str(r.method_wins).lower()})
