"""Command implementations over one artifact work directory.

Every command reads the outputs of earlier commands from the work directory,
writes into its own subdirectory and finishes with ``config.json``,
``metrics.json`` and ``manifest.json``. A failing command leaves ``error.json``
in its subdirectory instead of a manifest.

Layout::

    <workdir>/cohort/          synth
    <workdir>/preprocessed/    preprocess (train/ validation/ test/ mcar/ mnar/)
    <workdir>/vq/              train-vq
    <workdir>/profiles/        profile
    <workdir>/cpd/             cpd
    <workdir>/eval/            eval-events
    <workdir>/emotion/         emotion
    <workdir>/ablation/        ablate
    <workdir>/verify/          verify
    <workdir>/report/          report
"""

import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Type

import numpy as np
import pandas as pd

from ..core.config import resolve_output_dir, settings
from ..core.errors import DataValidationError, InsufficientClassesError, MissingArtifactError, VQProfilesError
from ..core.seeding import derive_seed
from ..core.storage import (
    FORMAT_VERSION,
    hash_directory,
    hash_file,
    hash_payload,
    read_csv,
    read_json,
    read_model,
    write_csv,
    write_json,
)
from ..models.schemas import (
    AblateRunConfig,
    CohortManifest,
    CohortTruth,
    ConfusionCounts,
    CPDRunConfig,
    EmotionRunConfig,
    ErrorRecord,
    EvalEventsRunConfig,
    PreprocessConfig,
    ProfileRunConfig,
    ProfileSequence,
    ReportRunConfig,
    RobustScalerState,
    RunConfig,
    RunManifest,
    SynthConfig,
    TimeSeriesSample,
    TrainVQRunConfig,
    VerifyRunConfig,
)
from .cpd_service import cpd_service
from .datagen_service import datagen_service
from .emotion_service import emotion_service
from .experiment_service import ExperimentData, experiment_service
from .vq_service import vq_service
import logging

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
PROVENANCE_FILES = ("config.json", "manifest.json", "metrics.json", "error.json")


@dataclass
class RunContext:
    """Paths and seed of one command execution"""

    root: Path
    output: Path
    seed: int
    inputs: List[Path] = field(default_factory=list)

    def require(self, relative: str) -> Path:
        path = self.root / relative
        if not path.exists():
            logger.error(f"Missing input artifact {path}")
            raise MissingArtifactError(f"Missing input {relative}; run the command that produces it first", path=str(path))
        if path not in self.inputs:
            self.inputs.append(path)
        return path


@dataclass(frozen=True)
class Command:
    name: str
    config_model: Type[RunConfig]
    directory: str
    handler: Callable[[Any, RunContext], Dict[str, Any]]
    summary: str


def error_record(error: Exception, command: Optional[str] = None) -> ErrorRecord:
    details = dict(error.details) if isinstance(error, VQProfilesError) else {}
    message = error.message if isinstance(error, VQProfilesError) else str(error)
    return ErrorRecord(error=type(error).__name__, message=message, command=command, details=details)


def _lam_tag(lam: float) -> str:
    return f"{lam:g}"


class PipelineService:
    def __init__(self):
        self.commands: Dict[str, Command] = {
            c.name: c
            for c in (
                Command("synth", SynthConfig, "cohort", self._synth, "Generate a synthetic cohort"),
                Command("preprocess", PreprocessConfig, "preprocessed", self._preprocess, "Clip, split, scale and corrupt"),
                Command("train-vq", TrainVQRunConfig, "vq", self._train_vq, "Train a VQ profile model"),
                Command("profile", ProfileRunConfig, "profiles", self._profile, "Extract ranked profile sequences"),
                Command("cpd", CPDRunConfig, "cpd", self._cpd, "Run-length posteriors over profile sequences"),
                Command("eval-events", EvalEventsRunConfig, "eval", self._eval_events, "Alarms, ROC curves and AUC"),
                Command("emotion", EmotionRunConfig, "emotion", self._emotion, "Train and score the emotion classifier"),
                Command("ablate", AblateRunConfig, "ablation", self._ablate, "Evaluate the ablation grid"),
                Command("verify", VerifyRunConfig, "verify", self._verify, "Run the oracle suites or replay a run"),
                Command("report", ReportRunConfig, "report", self._report, "Consolidate plot-ready tables"),
            )
        }

    def command(self, name: str) -> Command:
        if name not in self.commands:
            raise VQProfilesError(f"Unknown command {name}", known=sorted(self.commands))
        return self.commands[name]

    def workdir(self, config: RunConfig) -> Path:
        return Path(resolve_output_dir(config.workdir))

    def output_dir(self, name: str, config: RunConfig) -> Path:
        return self.workdir(config) / self.command(name).directory

    def run_seed(self, config: RunConfig) -> int:
        return settings.global_seed if config.seed is None else config.seed

    def execute(self, name: str, config: RunConfig) -> RunManifest:
        """Run one command and write its provenance; failures leave an error record"""
        command = self.command(name)
        if not isinstance(config, command.config_model):
            config = command.config_model.model_validate(config.model_dump())
        root = self.workdir(config)
        ctx = RunContext(root=root, output=root / command.directory, seed=self.run_seed(config))
        ctx.output.mkdir(parents=True, exist_ok=True)
        for stale in ("manifest.json", "error.json"):
            (ctx.output / stale).unlink(missing_ok=True)
        write_json(ctx.output / "config.json", {"command": name, "config": config.model_dump(mode="json")})

        started = datetime.utcnow()
        clock = time.perf_counter()
        logger.info(f"Running {name} in {ctx.output} (seed {ctx.seed})")
        try:
            metrics = command.handler(config, ctx)
        except Exception as e:
            logger.error(f"{name} failed: {e}")
            write_json(ctx.output / "error.json", error_record(e, name))
            raise

        write_json(ctx.output / "metrics.json", metrics)
        manifest = RunManifest(
            command=name,
            config=config.model_dump(mode="json"),
            input_hashes={self._relative(root, path): self._hash_input(path) for path in ctx.inputs},
            output_hashes=self.output_hashes(ctx.output),
            artifact_versions={"checkpoint": FORMAT_VERSION, "posteriors": FORMAT_VERSION, "manifest": 1},
            started_at=started,
            finished_at=datetime.utcnow(),
            wall_clock_s=time.perf_counter() - clock,
            metrics=metrics,
        )
        write_json(ctx.output / "manifest.json", manifest)
        logger.info(f"{name} finished in {manifest.wall_clock_s:.1f}s")
        return manifest

    def _relative(self, root: Path, path: Path) -> str:
        return path.relative_to(root).as_posix()

    def _hash_input(self, path: Path) -> str:
        return hash_directory(path, exclude=self._excluded()) if path.is_dir() else hash_file(path)

    def _excluded(self) -> List[str]:
        return list(PROVENANCE_FILES) + [settings.log_file]

    def output_hashes(self, directory: Path) -> Dict[str, str]:
        skip = set(self._excluded())
        return {
            path.relative_to(directory).as_posix(): hash_file(path)
            for path in sorted(directory.rglob("*"))
            if path.is_file() and path.name not in skip and not path.name.startswith(".")
        }

    # ------------------------------------------------------------------
    # Shared loaders
    # ------------------------------------------------------------------

    def cohort_hash(self, cohort_dir: Path) -> str:
        """Hash of the cohort manifest (without its timestamp) and the sample files"""
        manifest = read_json(cohort_dir / "cohort.json")
        manifest.pop("created_at", None)
        return hash_payload([manifest, hash_directory(cohort_dir / "samples")])

    def _cohort(self, ctx: RunContext) -> CohortManifest:
        return read_model(ctx.require("cohort") / "cohort.json", CohortManifest)

    def _split(self, ctx: RunContext, split: str) -> List[TimeSeriesSample]:
        return datagen_service.load_samples(ctx.require(f"preprocessed/{split}"))

    def _scaler(self, ctx: RunContext) -> RobustScalerState:
        return read_model(ctx.require("preprocessed") / "scaler.json", RobustScalerState)

    def _profiles(self, ctx: RunContext, split: str) -> List[ProfileSequence]:
        return [ProfileSequence.model_validate(p) for p in read_json(ctx.require(f"profiles/{split}.json"))]

    def _events(self, samples: List[TimeSeriesSample], truth: CohortTruth) -> Dict[str, List[int]]:
        return {s.sample_id: experiment_service.events_for_sample(s, truth) for s in samples}

    # ------------------------------------------------------------------
    # Commands
    # ------------------------------------------------------------------

    def _synth(self, config: SynthConfig, ctx: RunContext) -> Dict[str, Any]:
        cohort_config = config.cohort if config.seed is None else config.cohort.model_copy(update={"seed": config.seed})
        samples, truth = datagen_service.generate_cohort(cohort_config)
        datagen_service.save_samples(ctx.output / "samples", samples)
        write_json(
            ctx.output / "cohort.json",
            CohortManifest(
                seed=cohort_config.seed,
                config=cohort_config.model_dump(mode="json"),
                catalog=datagen_service.catalog,
                samples=[s.sample_id for s in samples],
                truth=truth,
            ),
        )
        write_csv(ctx.output / "events.csv", datagen_service.events_frame(truth))
        regimes = pd.DataFrame(
            [
                {"patient_id": pid, "day_index": day, "regime": regime, "emotion": patient.emotions[day]}
                for pid, patient in sorted(truth.patients.items())
                for day, regime in enumerate(patient.regimes)
            ]
        )
        write_csv(ctx.output / "regimes.csv", regimes)
        return {
            "n_patients": len(samples),
            "n_days": int(sum(s.n_days for s in samples)),
            "n_events": int(sum(len(p.events) for p in truth.patients.values())),
            "n_emotion_labels": int(sum(int(np.sum(np.asarray(p.emotions) >= 0)) for p in truth.patients.values())),
            "cohort_hash": self.cohort_hash(ctx.output),
        }

    def _preprocess(self, config: PreprocessConfig, ctx: RunContext) -> Dict[str, Any]:
        cohort = self._cohort(ctx)
        raw = datagen_service.load_samples(ctx.require("cohort/samples"))
        pieces = [
            piece
            for sample in raw
            for piece in datagen_service.split_on_gaps(datagen_service.clip_and_flag(sample, cohort.catalog), config.min_length)
        ]
        if not pieces:
            raise DataValidationError("No sequence survives gap splitting", min_length=config.min_length)

        partitions = datagen_service.partition_patients(
            [p.patient_id for p in pieces], config.partition, derive_seed(ctx.seed, "preprocess.partition")
        )
        write_json(ctx.output / "partitions.json", [p.model_dump(mode="json") for p in partitions])
        partition = partitions[config.partition.partition_index]
        splits = {name: [p for p in pieces if p.patient_id in set(getattr(partition, name))] for name in SPLITS}

        scaler = datagen_service.fit_scaler(splits["train"], cohort.catalog)
        write_json(ctx.output / "scaler.json", scaler)
        scaled = {name: [datagen_service.apply_scaler(s, scaler) for s in group] for name, group in splits.items()}
        for name, group in scaled.items():
            datagen_service.save_samples(ctx.output / name, group)

        mcar = [
            datagen_service.corrupt_mcar(s, derive_seed(ctx.seed, "preprocess.mcar"), config.corruption, cohort.catalog)
            for s in scaled["test"]
        ]
        mnar = [
            datagen_service.corrupt_mnar(
                s, derive_seed(ctx.seed, "preprocess.mnar"), config=config.corruption, catalog=cohort.catalog
            )
            for s in scaled["test"]
        ]
        datagen_service.save_samples(ctx.output / "mcar", mcar)
        datagen_service.save_samples(ctx.output / "mnar", mnar)
        return {
            "n_sequences": len(pieces),
            "split_sequences": {name: len(group) for name, group in splits.items()},
            "split_patients": {name: len(getattr(partition, name)) for name in SPLITS},
            "mcar_entries": int(sum((s.mask == 2).sum() for s in mcar)),
            "mnar_entries": int(sum((s.mask == 2).sum() for s in mnar)),
            "cohort_hash": self.cohort_hash(ctx.root / "cohort"),
        }

    def _train_vq(self, config: TrainVQRunConfig, ctx: RunContext) -> Dict[str, Any]:
        cohort = self._cohort(ctx)
        scaler = self._scaler(ctx)
        train, validation, test = (self._split(ctx, name) for name in SPLITS)
        model_config = config.model if config.seed is None else config.model.model_copy(update={"seed": config.seed})
        binary = vq_service.binary_flags(scaler.variables, cohort.catalog)

        result = vq_service.train(train, model_config, binary, validation_samples=validation or None)
        vq_service.save_model(ctx.output / config.checkpoint_name, result, model_config, scaler.variables, binary, scaler)
        write_csv(ctx.output / "history.csv", pd.DataFrame([r.model_dump() for r in result.history]))

        mcar = datagen_service.load_samples(ctx.require("preprocessed/mcar"))
        mnar = datagen_service.load_samples(ctx.require("preprocessed/mnar"))
        report = vq_service.reconstruction_metrics(result.model, scaler, test, mcar, mnar, cohort.catalog)
        write_json(ctx.output / "reconstruction.json", report)
        write_csv(ctx.output / "reconstruction.csv", pd.DataFrame([v.model_dump(mode="json") for v in report.variables]))

        encoded = [vq_service.encode_sample(result.model, s) for s in train + validation + test]
        per_sample, usage = vq_service.codebook_usage(encoded, model_config.codebook_size)
        write_csv(ctx.output / "codebook_per_sample.csv", per_sample)
        write_csv(ctx.output / "codebook_usage.csv", usage)

        last = result.history[-1]
        beaten = [
            v.variable
            for v in report.variables
            if v.mcar_mae is not None and v.baseline_mcar_mae is not None and v.mcar_mae < v.baseline_mcar_mae
        ]
        return {
            "variant": model_config.variant.value,
            "epochs": len(result.history),
            "train_loss": last.train_loss,
            "val_loss": last.val_loss,
            "perplexity": last.perplexity,
            "codes_used": int((usage["count"] > 0).sum()),
            "mcar_beats_median": beaten,
        }

    def _profile(self, config: ProfileRunConfig, ctx: RunContext) -> Dict[str, Any]:
        model, _ = vq_service.load_model(ctx.require(f"vq/{config.checkpoint_name}"))
        metrics: Dict[str, Any] = {"n_profiles": config.n_profiles, "mode": config.mode.value, "splits": {}}
        for split in config.splits:
            samples = self._split(ctx, split)
            _, profiles = experiment_service.profile_samples(model, samples, config.n_profiles, config.mode)
            write_json(ctx.output / f"{split}.json", [p.model_dump(mode="json") for p in profiles])
            rows = [
                {
                    "sample_id": sample.sample_id,
                    "patient_id": sample.patient_id,
                    "day_index": int(day),
                    "code": code,
                    "profile_id": profile_id,
                }
                for sample, profile in zip(samples, profiles)
                for day, code, profile_id in zip(sample.day_index, profile.codes, profile.profile_ids)
            ]
            write_csv(ctx.output / f"{split}.csv", pd.DataFrame(rows))
            dummy = [np.asarray(p.profile_ids) == p.dummy_id for p in profiles]
            metrics["splits"][split] = {
                "n_sequences": len(profiles),
                "dummy_share": float(np.mean(np.concatenate(dummy))) if dummy else 0.0,
            }
        write_json(ctx.output / "index.json", {"splits": list(config.splits), "n_profiles": config.n_profiles})
        return metrics

    def _cpd(self, config: CPDRunConfig, ctx: RunContext) -> Dict[str, Any]:
        splits = read_json(ctx.require("profiles") / "index.json")["splits"]
        metrics: Dict[str, Any] = {"variant": config.model.variant.value, "log_evidence": {}}
        for split in splits:
            profiles = self._profiles(ctx, split)
            for lam in config.lambdas:
                posteriors = {
                    p.sample_id: cpd_service.run_profile(p, config.model, lam, config.pruning, derive_seed(ctx.seed, "cpd"))
                    for p in profiles
                }
                frames = [posterior.frame(sample_id) for sample_id, posterior in posteriors.items()]
                write_csv(ctx.output / f"{split}-lambda{_lam_tag(lam)}.csv", pd.concat(frames, ignore_index=True))
                if config.dump_posteriors:
                    cpd_service.save_posterior_dump(ctx.output / f"{split}-lambda{_lam_tag(lam)}.npz", posteriors)
                metrics["log_evidence"][f"{split}/{_lam_tag(lam)}"] = float(
                    sum(posterior.log_evidence for posterior in posteriors.values())
                )
        write_json(ctx.output / "index.json", {"splits": splits, "lambdas": list(config.lambdas)})
        return metrics

    def _eval_events(self, config: EvalEventsRunConfig, ctx: RunContext) -> Dict[str, Any]:
        index = read_json(ctx.require("cpd") / "index.json")
        truth = self._cohort(ctx).truth
        metrics: Dict[str, Any] = {"method": config.alarm.method.value, "window": config.alarm.window, "auc": {}}
        confusion: Dict[str, Any] = {}
        for split in index["splits"]:
            events = self._events(self._split(ctx, split), truth)
            for lam in index["lambdas"]:
                tag = f"{split}/{_lam_tag(lam)}"
                series = read_csv(ctx.require(f"cpd/{split}-lambda{_lam_tag(lam)}.csv"))
                scores, sample_events = [], []
                total = ConfusionCounts()
                for sample_id, group in series.groupby("sample_id", sort=False):
                    group = group.sort_values("day")
                    sample_scores = cpd_service.score_series(
                        group["map_run_length"].to_numpy(), group["expected_run_length"].to_numpy(), config.alarm
                    )
                    scores.append(sample_scores)
                    sample_events.append(events.get(str(sample_id), []))
                    fired = cpd_service.alarms_from_scores(sample_scores, config.alarm)
                    total = total + cpd_service.evaluate_events(fired, sample_events[-1], config.alarm.window)
                curve = cpd_service.roc_from_scores(scores, sample_events, config.alarm, config.thresholds, lam)
                write_csv(
                    ctx.output / f"roc-{split}-lambda{_lam_tag(lam)}.csv",
                    pd.DataFrame([p.model_dump() for p in curve.points]),
                )
                metrics["auc"][tag] = curve.auc
                confusion[tag] = {**total.model_dump(), "sensitivity": total.sensitivity, "fpr": total.fpr}
        write_json(ctx.output / "confusion.json", confusion)
        write_json(ctx.output / "auc.json", metrics["auc"])
        metrics["mean_auc"] = float(np.mean(list(metrics["auc"].values()))) if metrics["auc"] else None
        return metrics

    def _emotion(self, config: EmotionRunConfig, ctx: RunContext) -> Dict[str, Any]:
        truth = self._cohort(ctx).truth
        model, _ = vq_service.load_model(ctx.require(f"vq/{config.checkpoint_name}"))
        spec = config.classifier
        train = experiment_service.emotion_windows(
            model, self._split(ctx, "train") + self._split(ctx, "validation"), truth, config.embedding_source, spec.window
        )
        test = experiment_service.emotion_windows(model, self._split(ctx, "test"), truth, config.embedding_source, spec.window)

        result = emotion_service.train_emotion_cnn(train, spec, derive_seed(ctx.seed, "emotion"))
        emotion_service.save_model(ctx.output / "emotion.pt", result, spec)
        write_csv(ctx.output / "history.csv", pd.DataFrame([r.model_dump() for r in result.history]))
        scores = emotion_service.predict(result.model, test.inputs)
        write_csv(ctx.output / "predictions.csv", emotion_service.predictions_frame(test, scores))
        try:
            weighted_auc = emotion_service.weighted_auc(scores, test.labels)
        except InsufficientClassesError as e:
            logger.warning(f"Weighted AUC skipped: {e}")
            weighted_auc = None
        return {
            "train_windows": len(train),
            "test_windows": len(test),
            "epochs": len(result.history),
            "best_epoch": result.best_epoch,
            "stopped_early": result.stopped_early,
            "weighted_auc": weighted_auc,
        }

    def experiment_data(self, ctx: RunContext) -> ExperimentData:
        cohort = self._cohort(ctx)
        scaler = self._scaler(ctx)
        return ExperimentData(
            train=self._split(ctx, "train"),
            validation=self._split(ctx, "validation"),
            test=self._split(ctx, "test"),
            truth=cohort.truth,
            scaler=scaler,
            binary=vq_service.binary_flags(scaler.variables, cohort.catalog),
            cohort_hash=self.cohort_hash(ctx.root / "cohort"),
        )

    def _ablate(self, config: AblateRunConfig, ctx: RunContext) -> Dict[str, Any]:
        cells = experiment_service.run_ablation(config, self.experiment_data(ctx), ctx.output / "checkpoints")
        write_json(ctx.output / "cells.json", [cell.model_dump(mode="json") for cell in cells])
        write_csv(ctx.output / "cells.csv", experiment_service.cells_frame(cells))
        for metric, table in experiment_service.ablation_tables(cells).items():
            table.columns = [f"w{w}" for w in table.columns]
            write_csv(ctx.output / f"table-{metric}.csv", table.reset_index())
        return {"cells": {cell.key: [cell.event_auc, cell.emotion_weighted_auc] for cell in cells}}

    def _verify(self, config: VerifyRunConfig, ctx: RunContext) -> Dict[str, Any]:
        from .verification_service import verification_service

        if config.replay:
            return verification_service.replay(Path(resolve_output_dir(config.replay)), ctx.output)
        return verification_service.run_suites(config, ctx.output, derive_seed(ctx.seed, "verify"))

    def _report(self, config: ReportRunConfig, ctx: RunContext) -> Dict[str, Any]:
        root, missing, written = ctx.root, [], []

        def collect(pattern: str, name: str, tag: Callable[[Path], Dict[str, Any]]) -> None:
            files = sorted(root.glob(pattern))
            if not files:
                logger.warning(f"Report: no artifacts match {pattern}")
                missing.append(pattern)
                return
            frames = []
            for path in files:
                frame = read_csv(path)
                for key, value in tag(path).items():
                    frame.insert(0, key, value)
                frames.append(frame)
            write_csv(ctx.output / name, pd.concat(frames, ignore_index=True))
            written.append(name)

        def split_lambda(path: Path) -> Dict[str, Any]:
            split, _, lam = path.stem.rpartition("-lambda")
            return {"lambda": float(lam), "split": split.removeprefix("roc-")}

        collect("eval/roc-*.csv", "roc_series.csv", split_lambda)
        collect("cpd/*-lambda*.csv", "run_length_series.csv", split_lambda)
        collect("vq/history.csv", "training_curves.csv", lambda _: {})
        collect("vq/codebook_usage.csv", "codebook_usage.csv", lambda _: {})
        collect("vq/reconstruction.csv", "reconstruction.csv", lambda _: {})
        collect("emotion/history.csv", "emotion_curves.csv", lambda _: {})
        collect("ablation/cells.csv", "ablation_grid.csv", lambda _: {})
        collect("ablation/table-event_auc.csv", "ablation_event_auc.csv", lambda _: {})
        collect("ablation/table-emotion_weighted_auc.csv", "ablation_emotion_auc.csv", lambda _: {})

        if (ctx.output / "roc_series.csv").exists():
            series = read_csv(ctx.output / "roc_series.csv").sort_values(["split", "lambda", "fpr", "tpr"])
            write_csv(ctx.output / "roc_series.csv", series)
        write_json(ctx.output / "missing.json", missing)
        return {"tables": written, "missing": missing}


# Global pipeline service instance
pipeline_service = PipelineService()
