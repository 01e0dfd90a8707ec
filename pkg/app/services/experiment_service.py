"""Experiment orchestration over trained profile models.

Joins profile sequences with the cohort ground truth (event days, emotion
labels), scores event detection per hazard rate and runs the ablation grid
over variant, embedding dimension and dictionary size.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..core.config import settings
from ..core.errors import DataValidationError, InsufficientClassesError, MissingArtifactError
from ..core.seeding import derive_seed
from ..models.schemas import (
    AblateRunConfig,
    AblationCell,
    AlarmConfig,
    ClassifierSpec,
    CohortTruth,
    CPDModelConfig,
    EmbeddingSource,
    ProfileMode,
    ProfileSequence,
    PruningConfig,
    RobustScalerState,
    RocCurve,
    TimeSeriesSample,
    Variant,
)
from .cpd_service import RunLengthPosterior, cpd_service
from .emotion_service import EmotionWindows, emotion_service
from .vq_model import VQModel
from .vq_service import EncodedSample, vq_service
import logging

logger = logging.getLogger(__name__)


@dataclass
class ExperimentData:
    """Scaled splits of one preprocessed cohort plus its ground truth"""

    train: List[TimeSeriesSample]
    validation: List[TimeSeriesSample]
    test: List[TimeSeriesSample]
    truth: CohortTruth
    scaler: RobustScalerState
    binary: List[bool]
    cohort_hash: str = ""


@dataclass(frozen=True)
class _CheckpointJob:
    variant: Variant
    embedding_dim: int
    codebook_size: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.variant.value}-d{self.embedding_dim}-w{self.codebook_size}-seed{self.seed}"


class ExperimentService:
    def events_for_sample(self, sample: TimeSeriesSample, truth: CohortTruth) -> List[int]:
        """Positions within the sample whose original day carries an event"""
        patient = truth.patients.get(sample.patient_id)
        if patient is None:
            return []
        return [int(p) for p in np.flatnonzero(np.isin(sample.day_index, patient.events))]

    def labels_for_sample(self, sample: TimeSeriesSample, truth: CohortTruth) -> np.ndarray:
        """Per-position emotion label, -1 where unreported"""
        patient = truth.patients.get(sample.patient_id)
        if patient is None or not patient.emotions:
            return np.full(sample.n_days, -1, dtype=np.int64)
        return np.asarray(patient.emotions, dtype=np.int64)[sample.day_index]

    def profile_samples(
        self,
        model: VQModel,
        samples: Sequence[TimeSeriesSample],
        n_profiles: int,
        mode: ProfileMode = ProfileMode.DISCRETE,
    ) -> Tuple[List[EncodedSample], List[ProfileSequence]]:
        encoded = [vq_service.encode_sample(model, sample) for sample in samples]
        profiles = [
            vq_service.profile_sequence(e.codes, n_profiles, mode, e.probabilities, e.sample_id) for e in encoded
        ]
        return encoded, profiles

    def event_curves(
        self,
        profiles: Sequence[ProfileSequence],
        events: Sequence[Sequence[int]],
        model_config: CPDModelConfig,
        lambdas: Sequence[float],
        alarm: AlarmConfig,
        pruning: Optional[PruningConfig] = None,
        seed: int = 0,
        thresholds: Optional[Sequence[float]] = None,
    ) -> Tuple[Dict[float, RocCurve], Dict[float, Dict[str, RunLengthPosterior]]]:
        """One ROC curve per hazard rate, pooled over all profile sequences"""
        curves: Dict[float, RocCurve] = {}
        posteriors: Dict[float, Dict[str, RunLengthPosterior]] = {}
        for lam in lambdas:
            posteriors[lam] = {
                profile.sample_id: cpd_service.run_profile(profile, model_config, lam, pruning, seed) for profile in profiles
            }
            curves[lam] = cpd_service.roc_sweep(list(posteriors[lam].values()), events, alarm, thresholds, lam)
        return curves, posteriors

    def emotion_windows(
        self,
        model: VQModel,
        samples: Sequence[TimeSeriesSample],
        truth: CohortTruth,
        source: EmbeddingSource = EmbeddingSource.HARD,
        window: int = 7,
    ) -> EmotionWindows:
        codebook = model.codebook.embeddings.detach().double().numpy()
        embeddings, labels, patient_of, days = {}, {}, {}, {}
        for sample in samples:
            encoded = vq_service.encode_sample(model, sample)
            embeddings[sample.sample_id] = emotion_service.day_embeddings(encoded, codebook, source)
            labels[sample.sample_id] = self.labels_for_sample(sample, truth)
            patient_of[sample.sample_id] = sample.patient_id
            days[sample.sample_id] = sample.day_index
        return emotion_service.build_windows(embeddings, labels, window, patient_of, days)

    def emotion_auc(
        self,
        model: VQModel,
        train_samples: Sequence[TimeSeriesSample],
        test_samples: Sequence[TimeSeriesSample],
        truth: CohortTruth,
        spec: ClassifierSpec,
        source: EmbeddingSource = EmbeddingSource.HARD,
        seed: int = 0,
    ) -> Optional[float]:
        """Weighted AUC of a classifier trained on train-patient windows, scored on test patients"""
        train = self.emotion_windows(model, train_samples, truth, source, spec.window)
        test = self.emotion_windows(model, test_samples, truth, source, spec.window)
        overlap = set(train.patient_ids) & set(test.patient_ids)
        if overlap:
            raise DataValidationError("Emotion windows share patients across splits", patients=sorted(overlap))
        if not len(test):
            logger.warning("Emotion score skipped: no labelled test windows")
            return None
        try:
            result = emotion_service.train_emotion_cnn(train, spec, seed)
            return emotion_service.weighted_auc(emotion_service.predict(result.model, test.inputs), test.labels)
        except InsufficientClassesError as e:
            logger.warning(f"Emotion score skipped: {e}")
            return None

    # ------------------------------------------------------------------
    # Ablation grid
    # ------------------------------------------------------------------

    def _checkpoint_model(
        self, job: _CheckpointJob, config: AblateRunConfig, data: ExperimentData, checkpoint_dir: Optional[Path]
    ) -> VQModel:
        path = Path(checkpoint_dir) / f"{job.name}.pt" if checkpoint_dir is not None else None
        if path is not None and path.exists():
            model, _ = vq_service.load_model(path)
            return model
        if not config.train_missing:
            logger.error(f"Missing checkpoint for ablation cell {job.name}")
            raise MissingArtifactError(f"No checkpoint for {job.name}", path=str(path))

        training = config.training.model_copy(
            update={
                "variant": job.variant,
                "embedding_dim": job.embedding_dim,
                "codebook_size": job.codebook_size,
                "seed": job.seed,
            }
        )
        logger.info(f"Training ablation checkpoint {job.name}")
        result = vq_service.train(data.train, training, data.binary, validation_samples=data.validation or None)
        if path is not None:
            vq_service.save_model(path, result, training, data.scaler.variables, data.binary, data.scaler)
        return result.model

    def _run_job(
        self, job: _CheckpointJob, config: AblateRunConfig, data: ExperimentData, checkpoint_dir: Optional[Path]
    ) -> List[AblationCell]:
        grid = config.grid
        model = self._checkpoint_model(job, config, data, checkpoint_dir)
        alarm = config.alarm.model_copy(update={"window": grid.window})
        cpd_config = CPDModelConfig(variant=grid.cpd_variant, samples=grid.samples)
        events = [self.events_for_sample(sample, data.truth) for sample in data.test]

        emotion = None
        if config.emotion:
            # hard embeddings look up raw codes, so the score does not depend on m
            emotion = self.emotion_auc(
                model,
                data.train + data.validation,
                data.test,
                data.truth,
                config.classifier,
                seed=derive_seed(job.seed, "ablation.emotion"),
            )

        encoded = [vq_service.encode_sample(model, sample) for sample in data.test]
        cells = []
        for n_profiles in grid.n_profiles:
            profiles = [
                vq_service.profile_sequence(e.codes, n_profiles, grid.profile_mode, e.probabilities, e.sample_id)
                for e in encoded
            ]
            curves, _ = self.event_curves(
                profiles, events, cpd_config, grid.lambdas, alarm, seed=derive_seed(job.seed, "ablation.cpd")
            )
            per_lambda = {f"{lam:g}": curve.auc for lam, curve in curves.items()}
            cell = AblationCell(
                variant=job.variant,
                embedding_dim=job.embedding_dim,
                codebook_size=job.codebook_size,
                n_profiles=n_profiles,
                samples=grid.samples,
                window=grid.window,
                lambdas=list(grid.lambdas),
                cpd_variant=grid.cpd_variant,
                profile_mode=grid.profile_mode,
                seed=job.seed,
                cohort_hash=data.cohort_hash,
                event_auc=float(np.mean(list(per_lambda.values()))) if per_lambda else None,
                event_auc_per_lambda=per_lambda,
                emotion_weighted_auc=emotion,
            )
            logger.info(f"Ablation cell {cell.key}: event AUC {cell.event_auc} emotion AUC {cell.emotion_weighted_auc}")
            cells.append(cell)
        return cells

    def run_ablation(
        self, config: AblateRunConfig, data: ExperimentData, checkpoint_dir: Optional[Path] = None
    ) -> List[AblationCell]:
        """Evaluate every grid cell; cells sharing a checkpoint are evaluated by one worker"""
        grid = config.grid
        jobs = [
            _CheckpointJob(variant, d, w, seed)
            for variant, d, w, seed in product(grid.variants, grid.embedding_dims, grid.codebook_sizes, config.seeds)
        ]
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        workers = min(config.max_workers or settings.max_workers, max(len(jobs), 1))
        logger.info(f"Running {len(jobs) * len(grid.n_profiles)} ablation cells on {workers} workers")

        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(lambda job: self._run_job(job, config, data, checkpoint_dir), jobs))
        return [cell for cells in results for cell in cells]

    def cells_frame(self, cells: Sequence[AblationCell]) -> pd.DataFrame:
        rows = []
        for cell in cells:
            row = cell.model_dump(mode="json", exclude={"event_auc_per_lambda", "lambdas"})
            row["key"] = cell.key
            row["lambdas"] = ";".join(f"{lam:g}" for lam in cell.lambdas)
            for lam, value in cell.event_auc_per_lambda.items():
                row[f"event_auc_lambda_{lam}"] = value
            rows.append(row)
        return pd.DataFrame(rows)

    def ablation_tables(self, cells: Sequence[AblationCell]) -> Dict[str, pd.DataFrame]:
        """Metric grids over embedding dimension x dictionary size, averaged over seeds"""
        frame = self.cells_frame(cells)
        tables: Dict[str, pd.DataFrame] = {}
        for metric in ("event_auc", "emotion_weighted_auc"):
            if frame.empty or frame[metric].isna().all():
                continue
            tables[metric] = frame.pivot_table(
                index=["variant", "n_profiles", "embedding_dim"],
                columns="codebook_size",
                values=metric,
                aggfunc="mean",
            )
        return tables


# Global experiment service instance
experiment_service = ExperimentService()
