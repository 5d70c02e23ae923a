"""
Command-line entry point.

    python main.py prepare --synthetic tones --out data/tones
    python main.py train --set dataset.path=data/tones/manifest.jsonl --set train.epochs=30
    python main.py eval --checkpoint runs/train-.../best.ckpt --set dataset.path=...
    python main.py sweep --checkpoint ... --snr 20,10,5,0,-5 --noise wgn
    python main.py ablate-p | spectro-stats | cross-eval | results | selftest

Exit codes: 0 success, 2 configuration/usage error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

import seeding
from augment import NoiseKind, SnrSpec, fix_length, load_noise_bank
from config import ExperimentConfig, config, load_experiment_config, write_config_snapshot
from database import DatabaseManager
from dsp import log_spectrogram, mean_spectrogram, mfcc, write_pgm
from errors import ConfigError, DataError, KwsError
from evaluation import (ResultRow, ablate_p, cross_domain_eval, evaluate, format_f1, sweep, trend_check,
                        write_ablation_csv, write_results_csv, write_summary_csv, write_trend_csv)
from manifest import (ClassMap, Manifest, Split, build_gsc_manifest, get_scheme, load_example,
                      load_jsonl_manifest, write_jsonl_manifest)
from nn import build_resnet15, load_checkpoint
from uncertainty import Method, UncertaintyConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_DATEFMT = '%d/%m/%Y-%H:%M:%S'

COMMANDS = ["prepare", "train", "eval", "sweep", "ablate-p", "trend-check", "spectro-stats", "cross-eval", "results",
            "selftest"]


def configure_logging(level: str = config.LOG_LEVEL):
    """Console + dated file under logs/"""
    os.makedirs(config.LOGS_DIR, exist_ok=True)
    log_filename = os.path.join(config.LOGS_DIR, f"{datetime.now().strftime('%Y-%m-%d')}.log")
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
        handlers=[
            logging.FileHandler(log_filename, encoding='utf-8'),
            logging.StreamHandler()  # Keep console output as well
        ]
    )


class RunContext:
    """Run directory with config snapshot, run.log handler and a ledger row"""

    def __init__(self, command: str, experiment: ExperimentConfig, run_dir: Optional[str],
                 ledger: Optional[DatabaseManager]):
        self.command = command
        self.experiment = experiment
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        self.run_dir = Path(run_dir) if run_dir else Path(config.RUNS_DIR) / f"{command}-{stamp}"
        self.ledger = ledger
        self.run_id = None
        self._handler = None

    def __enter__(self) -> "RunContext":
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_config_snapshot(self.experiment, self.run_dir / config.SNAPSHOT_NAME)
        self._handler = logging.FileHandler(self.run_dir / "run.log", encoding="utf-8")
        self._handler.setFormatter(logging.Formatter(LOG_FORMAT, LOG_DATEFMT))
        logging.getLogger().addHandler(self._handler)
        logger.info("=" * 60)
        logger.info(f"🚀 {self.command} -> {self.run_dir}")
        logger.info("=" * 60)
        if self.ledger is not None:
            self.run_id = self.ledger.start_run(
                self.command, str(self.run_dir.absolute()), self.experiment.seed,
                self.experiment.model_dump_json(), method_label(self.experiment.uncertainty),
                self.experiment.dataset.label)
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.ledger is not None and self.run_id is not None:
            if exc is None:
                self.ledger.finish_run(self.run_id)
            else:
                self.ledger.finish_run(self.run_id, "FAILED", str(exc))
        if exc is None:
            logger.info(f"✅ {self.command} finished")
        logging.getLogger().removeHandler(self._handler)
        self._handler.close()
        return False


def method_label(u: UncertaintyConfig) -> str:
    if u.preset:
        return u.preset
    if u.method == Method.PATCHDSU:
        return f"patchdsu-{u.k_h}x{u.k_w}"
    return u.method.value


def load_dataset(experiment: ExperimentConfig) -> Manifest:
    ds = experiment.dataset
    if not ds.path:
        raise ConfigError("dataset.path is not set (use --set dataset.path=...)")
    scheme = get_scheme(ds.scheme)
    if ds.kind == "gsc":
        return build_gsc_manifest(ds.path, scheme)
    return load_jsonl_manifest(ds.path, scheme)


def load_bank(experiment: ExperimentConfig):
    """Noise bank from augment.noise_dir, else the dataset's _background_noise_ directory"""
    if experiment.augment.noise_dir:
        return load_noise_bank(experiment.augment.noise_dir)
    if not experiment.dataset.path:
        return []
    root = Path(experiment.dataset.path)
    root = root if experiment.dataset.kind == "gsc" else root.parent
    candidate = root / "_background_noise_"
    if candidate.is_dir() and any(candidate.glob("*.wav")):
        return load_noise_bank(candidate)
    logger.info("No background-noise directory; training without noise mixing")
    return []


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got '{text}'")


def _train_one(experiment: ExperimentConfig, manifest: Manifest, bank, run_dir: Path,
               ledger: Optional[DatabaseManager], run_id: Optional[int], seed: int):
    from train import fit

    model = build_resnet15(experiment.model, len(manifest.class_map), seeding.substream(seed, seeding.INIT))
    policy = experiment.augment.model_copy(update={"noise_bank": bank})
    header = {"seed": seed, "dataset": experiment.dataset.label,
              "uncertainty": experiment.uncertainty.model_dump(mode="json", by_alias=True),
              "frontend": experiment.frontend.model_dump(mode="json"),
              "trim_enabled": experiment.augment.trim_enabled}
    report = fit(manifest, model, experiment.train, policy, experiment.uncertainty, experiment.frontend,
                 seed, run_dir=run_dir, max_workers=config.MAX_WORKERS, checkpoint_header=header)
    if ledger is not None and run_id is not None:
        ledger.add_metrics(run_id, report.history)
    return model, report


def _load_model(path: str, experiment: ExperimentConfig):
    model, header = load_checkpoint(path)
    saved = header.get("frontend")
    if saved is not None and saved != experiment.frontend.model_dump(mode="json"):
        logger.warning("⚠️  Checkpoint was trained with other front-end parameters than the current config")
    class_map = ClassMap(**header["class_map"]) if "class_map" in header else None
    return model, header, class_map


def cmd_prepare(args, experiment: ExperimentConfig, ctx: RunContext) -> int:
    from synthetic import make_keyword_corpus, make_tone_corpus

    if args.synthetic:
        out = Path(args.out) if args.out else ctx.run_dir / args.synthetic
        if args.synthetic == "tones":
            manifest = make_tone_corpus(out, seed=experiment.seed)
        else:
            manifest = make_keyword_corpus(out, seed=experiment.seed)
        path = out / "manifest.jsonl"
    else:
        manifest = load_dataset(experiment)
        path = Path(args.out) if args.out else ctx.run_dir / "manifest.jsonl"
        if path.suffix != ".jsonl":
            path = path / "manifest.jsonl"
        write_jsonl_manifest(manifest, path)
    manifest.check_partition()
    for split in Split:
        counts = manifest.class_counts(split)
        logger.info(f"{split.value}: {sum(counts.values())} examples " + json.dumps(counts))
    logger.info(f"Manifest written to {path}")
    return 0


def cmd_train(args, experiment: ExperimentConfig, ctx: RunContext) -> int:
    manifest = load_dataset(experiment)
    bank = load_bank(experiment)
    _, report = _train_one(experiment, manifest, bank, ctx.run_dir, ctx.ledger, ctx.run_id, experiment.seed)
    logger.info(f"Best validation macro F1 {format_f1(report.best_val_macro_f1)} at epoch {report.best_epoch}")
    return 0


def cmd_eval(args, experiment: ExperimentConfig, ctx: RunContext) -> int:
    manifest = load_dataset(experiment)
    model, header, _ = _load_model(args.checkpoint, experiment)
    noise = None
    if args.snr is not None:
        noise = SnrSpec(snr_db=args.snr, noise_kind=NoiseKind(args.noise))
    bank = load_bank(experiment) if noise is not None and noise.noise_kind == NoiseKind.BANK else []
    result = evaluate(model, manifest, experiment.eval.split, noise=noise, time_shift=args.shift,
                      seed=experiment.seed, frontend=experiment.frontend, noise_bank=bank,
                      trim=header.get("trim_enabled", False), batch_size=experiment.eval.batch_size,
                      cache_dir=experiment.dataset.cache_dir, max_workers=config.MAX_WORKERS)
    condition = "clean" if noise is None or noise.disabled else noise.noise_kind.value
    row = ResultRow(method=method_label(UncertaintyConfig(**header.get("uncertainty", {}))),
                    p=header.get("uncertainty", {}).get("p", 0.0), dataset=experiment.dataset.label,
                    condition=condition, snr_db=args.snr, shifted=args.shift, seed=experiment.seed,
                    macro_f1=result.macro_f1, per_class_f1=result.per_class_f1)
    write_results_csv([row], ctx.run_dir / "results.csv")
    (ctx.run_dir / "report.json").write_text(json.dumps({
        "checkpoint": str(args.checkpoint), "split": experiment.eval.split, "condition": condition,
        "snr_db": args.snr, "shifted": args.shift, "n_examples": result.n_examples,
        "macro_f1": round(result.macro_f1, 2), "per_class_f1": result.per_class_f1,
    }, indent=2))
    if ctx.ledger is not None:
        ctx.ledger.add_results(ctx.run_id, [row])
    logger.info(f"Macro F1 ({condition}{' shifted' if args.shift else ''}): {format_f1(result.macro_f1)}")
    return 0


def cmd_sweep(args, experiment: ExperimentConfig, ctx: RunContext) -> int:
    spec = experiment.eval
    updates = {}
    if args.snr:
        updates["snr_db"] = _floats(args.snr)
    if args.noise:
        updates["noise_kinds"] = [NoiseKind(k.strip()) for k in args.noise.split(",")]
    if args.shift:
        updates["time_shift_eval"] = True
    spec = spec.model_validate({**spec.model_dump(), **updates})

    manifest = load_dataset(experiment)
    bank = load_bank(experiment) if NoiseKind.BANK in spec.noise_kinds else []
    if spec.seed_mode == "eval":
        if not args.checkpoint:
            raise ConfigError("sweep in eval seed mode needs --checkpoint")
        model, header, _ = _load_model(args.checkpoint, experiment)
        uncertainty = UncertaintyConfig(**header.get("uncertainty", {}))
        models = [(experiment.seed, model)]
        trim = header.get("trim_enabled", False)
    else:
        uncertainty = experiment.uncertainty
        train_bank = load_bank(experiment)
        models = []
        for k in range(spec.n_seeds):
            seed = experiment.seed + k
            model, _ = _train_one(experiment, manifest, train_bank, ctx.run_dir / f"seed{seed}",
                                  ctx.ledger, ctx.run_id, seed)
            models.append((seed, model))
        trim = experiment.augment.trim_enabled
    rows = sweep(models, manifest, spec, method_label(uncertainty), uncertainty.p, experiment.dataset.label,
                 experiment.frontend, bank, trim, config.MAX_WORKERS)
    write_results_csv(rows, ctx.run_dir / "results.csv")
    write_summary_csv(rows, ctx.run_dir / "summary.csv")
    if ctx.ledger is not None:
        ctx.ledger.add_results(ctx.run_id, rows)
    logger.info(f"Wrote {len(rows)} result rows to {ctx.run_dir / 'results.csv'}")
    return 0


def cmd_ablate_p(args, experiment: ExperimentConfig, ctx: RunContext) -> int:
    if experiment.uncertainty.method == Method.NONE:
        raise ConfigError("ablate-p needs an uncertainty method (e.g. --set uncertainty.preset=patchdsu-6x10)")
    grid = _floats(args.p_grid) if args.p_grid else experiment.eval.p_grid
    manifest = load_dataset(experiment)
    experiment = experiment.model_copy(update={"augment": experiment.augment.model_copy(
        update={"noise_bank": load_bank(experiment)})})
    rows = ablate_p(manifest, experiment, grid, ctx.run_dir, max_workers=config.MAX_WORKERS)
    write_ablation_csv(rows, ctx.run_dir / "ablation.csv")
    logger.info(f"Wrote {len(rows)} rows to {ctx.run_dir / 'ablation.csv'}")
    return 0


def cmd_trend_check(args, experiment: ExperimentConfig, ctx: RunContext) -> int:
    seeds = [int(s) for s in _floats(args.seeds)] if args.seeds else [experiment.seed + k for k in range(3)]
    manifest = load_dataset(experiment)
    bank = load_bank(experiment)
    experiment = experiment.model_copy(update={"augment": experiment.augment.model_copy(
        update={"noise_bank": bank})})
    report = trend_check(manifest, experiment, seeds, args.snr, NoiseKind(args.noise), ctx.run_dir, bank,
                         config.MAX_WORKERS)
    write_trend_csv(report, ctx.run_dir / "trend.csv")
    (ctx.run_dir / "trend.json").write_text(json.dumps(
        {**report.model_dump(), "wins": report.wins, "holds": report.holds}, indent=2))
    return 0


def cmd_spectro_stats(args, experiment: ExperimentConfig, ctx: RunContext) -> int:
    manifest = load_dataset(experiment)
    frontend = experiment.frontend
    out = ctx.run_dir / "spectro"
    for label, name in enumerate(manifest.class_map.labels):
        examples = [e for e in manifest.split(args.split) if e.label == label][:args.max_per_class]
        if not examples:
            logger.warning(f"No '{args.split}' examples of class '{name}'")
            continue
        maps = []
        for i, example in enumerate(examples):
            w = fix_length(load_example(example, seeding.substream(experiment.seed, seeding.SILENCE, i)),
                           frontend.clip_samples)
            maps.append(log_spectrogram(w, frontend) if args.feature == "spectrogram" else mfcc(w, frontend)[0, 0])
        mean = mean_spectrogram(maps)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / f"mean_{name}.csv", mean, delimiter=",", fmt="%.6f")
        np.savetxt(out / f"first_{name}.csv", maps[0], delimiter=",", fmt="%.6f")
        write_pgm(out / f"mean_{name}.pgm", mean)
        write_pgm(out / f"first_{name}.pgm", maps[0])
        logger.info(f"{name}: mean {args.feature} over {len(maps)} examples, shape {mean.shape}")
    return 0


def cmd_cross_eval(args, experiment: ExperimentConfig, ctx: RunContext) -> int:
    model, header, source = _load_model(args.checkpoint, experiment)
    if source is None:
        raise DataError(f"{args.checkpoint} carries no class map")
    manifest = load_dataset(experiment)
    bank = load_bank(experiment)
    results = cross_domain_eval(model, source, manifest, experiment.seed, experiment.frontend, bank,
                                experiment.augment.trim_enabled, experiment.eval.batch_size, config.MAX_WORKERS)
    uncertainty = UncertaintyConfig(**header.get("uncertainty", {}))
    rows = [ResultRow(method=method_label(uncertainty), p=uncertainty.p,
                      dataset=f"{header.get('dataset', source.scheme_name)}->{experiment.dataset.label}",
                      condition=name, snr_db=-5.0 if name.endswith("-5") else None,
                      shifted=name.endswith("shifted"), seed=experiment.seed, macro_f1=value)
            for name, value in results.items()]
    write_results_csv(rows, ctx.run_dir / "results.csv")
    if ctx.ledger is not None:
        ctx.ledger.add_results(ctx.run_id, rows)
    return 0


def cmd_results(args, ledger: DatabaseManager) -> int:
    if args.summary:
        summary = ledger.summary()
        print(f"runs {summary.runs}  completed {summary.completed}  failed {summary.failed}  "
              f"results {summary.results}")
        for condition, best in sorted(summary.best_by_condition.items()):
            print(f"  {condition:<32} best macro_f1 {format_f1(best)}")
        return 0
    runs = ledger.list_runs(limit=args.limit, command=args.command_filter)
    print(f"{'id':>4}  {'command':<13} {'status':<10} {'method':<16} {'dataset':<12} run_dir")
    for run in runs:
        print(f"{run.id:>4}  {run.command:<13} {run.status:<10} {run.method or '-':<16} "
              f"{run.dataset or '-':<12} {run.run_dir}")
    if args.run_id is not None:
        metrics = ledger.get_metrics(args.run_id)
        if metrics:
            print()
            print(f"{'epoch':>5}  {'split':<10} {'loss':>8}  {'macro_f1':>8}  lr")
            for m in metrics:
                print(f"{m.epoch:>5}  {m.split:<10} {m.loss:>8.4f}  {format_f1(m.macro_f1):>8}  {m.lr:.5f}")
    results = ledger.list_results(run_id=args.run_id)
    if results:
        print()
        print(f"{'run':>4}  {'method':<16} {'condition':<18} {'snr':>6} {'shift':<5} {'seed':>4}  macro_f1")
        for r in results:
            snr = "" if r.snr_db is None else f"{r.snr_db:g}"
            print(f"{r.run_id:>4}  {r.method:<16} {r.condition:<18} {snr:>6} {str(r.shifted).lower():<5} "
                  f"{r.seed:>4}  {format_f1(r.macro_f1)}")
    return 0


def cmd_selftest(args) -> int:
    import pytest

    root = Path(__file__).parent
    pytest_args = ["-q", str(root)]
    if not args.full:
        pytest_args += ["-m", "not slow"]
    logger.info(f"Running test suites: pytest {' '.join(pytest_args)}")
    code = pytest.main(pytest_args)
    return 0 if code == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kws", description="Keyword spotting with feature-statistics uncertainty")
    parser.add_argument("--config", help="INI experiment config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--run-dir", help="output directory (default: $KWS_RUNS_DIR/<command>-<time>)")
    parser.add_argument("--db", default=None, help="ledger database URL (default: $KWS_DATABASE_URL)")
    parser.add_argument("--no-ledger", action="store_true", help="do not record the run in the ledger")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build/validate a manifest or generate a synthetic corpus")
    p.add_argument("--synthetic", choices=["tones", "keywords"])
    p.add_argument("--out")

    sub.add_parser("train", help="train one model")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--noise", choices=[k.value for k in NoiseKind], default=NoiseKind.WGN.value)
    p.add_argument("--shift", action="store_true", help="random ±100 ms time shift")

    p = sub.add_parser("sweep", help="noise/SNR grid evaluation")
    p.add_argument("--checkpoint")
    p.add_argument("--snr", help="comma list, e.g. 20,10,5,0,-5")
    p.add_argument("--noise", help="comma list of wgn,bank")
    p.add_argument("--shift", action="store_true", help="also evaluate with time shift")

    p = sub.add_parser("ablate-p", help="application-probability ablation")
    p.add_argument("--p-grid", help="comma list in [0, 1]")

    p = sub.add_parser("trend-check", help="baseline vs uncertainty method under one noisy condition, per seed")
    p.add_argument("--seeds", help="comma list (default: experiment.seed and the next two)")
    p.add_argument("--snr", type=float, default=-5.0)
    p.add_argument("--noise", choices=[k.value for k in NoiseKind], default=NoiseKind.WGN.value)

    p = sub.add_parser("spectro-stats", help="per-class mean spectrograms")
    p.add_argument("--feature", choices=["spectrogram", "mfcc"], default="spectrogram")
    p.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    p.add_argument("--max-per-class", type=int, default=200)

    p = sub.add_parser("cross-eval", help="out-of-domain evaluation on the configured dataset")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("results", help="list the run ledger")
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--command", dest="command_filter", choices=COMMANDS)
    p.add_argument("--run-id", type=int, help="also show the per-epoch metrics of this run")
    p.add_argument("--summary", action="store_true", help="run counts and best macro F1 per condition")

    p = sub.add_parser("selftest", help="run the test suites")
    p.add_argument("--full", action="store_true", help="include slow Monte Carlo and training checks")
    return parser


HANDLERS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate-p": cmd_ablate_p,
    "trend-check": cmd_trend_check,
    "spectro-stats": cmd_spectro_stats,
    "cross-eval": cmd_cross_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging()

    try:
        if args.command == "selftest":
            return cmd_selftest(args)
        ledger = None if args.no_ledger else DatabaseManager(args.db)
        if args.command == "results":
            if ledger is None:
                raise ConfigError("results needs the ledger")
            return cmd_results(args, ledger)
        experiment = load_experiment_config(args.config, args.overrides)
        with RunContext(args.command, experiment, args.run_dir, ledger) as ctx:
            return HANDLERS[args.command](args, experiment, ctx)
    except KwsError as e:
        logger.error(f"❌ {type(e).__name__}: {e}", exc_info=config.DEBUG)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"❌ invalid value: {e.errors()[0]['msg']}")
        return ConfigError.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
