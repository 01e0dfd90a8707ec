"""Synthetic cohort generation and the preprocessing pipeline.

Samples follow a hidden semi-Markov regime process. Natural missingness is
stored as mask 0 with NaN values in original space; synthetic corruption only
rewrites mask codes (1 -> 2) and keeps the true values so that imputation can be
scored against them.
"""

from datetime import date, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from sklearn.preprocessing import RobustScaler

from ..core.errors import DataValidationError, ScalerMismatchError, UnknownVariableError
from ..core.seeding import derive_seed, numpy_rng
from ..core.storage import read_csv, read_json, write_csv, write_json
from ..models.schemas import (
    CohortConfig,
    CohortTruth,
    Corruption,
    CorruptionConfig,
    MaskCode,
    MnarRule,
    Partition,
    PartitionConfig,
    PatientTruth,
    RobustScalerState,
    Space,
    TimeSeriesSample,
    ValueType,
    VariableSpec,
)
import logging

logger = logging.getLogger(__name__)


def default_catalog() -> List[VariableSpec]:
    """Daily behavioral variables with their clipping bounds and baseline missing rates"""
    return [
        VariableSpec(name="Time Walking", value_type=ValueType.POSITIVE_REAL, clip_min=120, clip_max=15000,
                     missing_rate=0.6279, location=2400, spread=900),
        VariableSpec(name="App Usage", value_type=ValueType.POSITIVE_REAL, clip_min=180, clip_max=35000,
                     missing_rate=0.8315, location=9000, spread=3000),
        VariableSpec(name="Practiced Sport", value_type=ValueType.BINARY, missing_rate=0.0,
                     location=0.3, spread=1.0, synthetic_missingness=False),
        VariableSpec(name="Total Steps", value_type=ValueType.COUNT, clip_min=150, clip_max=25000,
                     missing_rate=0.5530, location=6000, spread=2000),
        VariableSpec(name="Location Clusters", value_type=ValueType.COUNT, clip_min=1, clip_max=15,
                     missing_rate=0.7253, location=4, spread=1.5),
        VariableSpec(name="Distance", value_type=ValueType.POSITIVE_REAL, clip_min=20, clip_max=95000,
                     missing_rate=0.7301, location=8000, spread=3000),
        VariableSpec(name="Time at Home", value_type=ValueType.POSITIVE_REAL, clip_min=120,
                     missing_rate=0.8253, location=900, spread=150),
        VariableSpec(name="Weekend", value_type=ValueType.BINARY, missing_rate=0.0,
                     synthetic_missingness=False, calendar=True),
        VariableSpec(name="Sleep Duration", value_type=ValueType.POSITIVE_REAL, clip_min=3600, clip_max=54000,
                     missing_rate=0.6676, location=27000, spread=3600),
        VariableSpec(name="Sleep Start", value_type=ValueType.REAL, clip_min=-22500, clip_max=25000,
                     missing_rate=0.6611, location=0, spread=3600),
    ]


class DatagenService:
    def __init__(self):
        self.catalog = default_catalog()

    def _catalog_map(self, catalog: Optional[Sequence[VariableSpec]]) -> Dict[str, VariableSpec]:
        return {spec.name: spec for spec in (catalog or self.catalog)}

    # ------------------------------------------------------------------
    # Generation
    # ------------------------------------------------------------------

    def regime_offsets(self, spec: VariableSpec, index: int, n_regimes: int) -> np.ndarray:
        if spec.regime_offsets:
            if len(spec.regime_offsets) != n_regimes:
                raise DataValidationError(
                    f"{spec.name} defines {len(spec.regime_offsets)} regime offsets for {n_regimes} regimes"
                )
            return np.asarray(spec.regime_offsets, dtype=float)
        if n_regimes == 1:
            return np.zeros(1)
        sign = 1.0 if index % 2 == 0 else -1.0
        return sign * np.linspace(-1.0, 1.0, n_regimes)

    def sample_regimes(self, n_days: int, config: CohortConfig, rng: np.random.Generator) -> np.ndarray:
        """Semi-Markov regime path with a minimum dwell time"""
        regime = config.regime
        path = np.empty(n_days, dtype=np.int64)
        current = int(rng.integers(regime.n_regimes))
        dwell = 0
        for t in range(n_days):
            if t > 0 and regime.n_regimes > 1 and dwell >= regime.min_dwell and rng.random() < regime.switch_rate:
                others = [r for r in range(regime.n_regimes) if r != current]
                current = int(others[rng.integers(len(others))])
                dwell = 0
            path[t] = current
            dwell += 1
        return path

    def _emit(
        self,
        spec: VariableSpec,
        offsets: np.ndarray,
        regimes: np.ndarray,
        shift: float,
        effect: float,
        rng: np.random.Generator,
    ) -> np.ndarray:
        centre = spec.location + spec.spread * (effect * offsets[regimes] + shift)
        if spec.value_type == ValueType.REAL:
            return rng.normal(centre, spec.spread)
        if spec.value_type == ValueType.POSITIVE_REAL:
            mean = np.maximum(centre, 0.5 * spec.spread)
            shape = (mean / spec.spread) ** 2
            return rng.gamma(shape, mean / shape)
        if spec.value_type == ValueType.COUNT:
            mean = np.maximum(centre, 0.5)
            shape = np.maximum((mean / spec.spread) ** 2, 1e-3)
            return rng.poisson(rng.gamma(shape, mean / shape)).astype(float)
        probability = expit(logit(np.clip(spec.location, 1e-6, 1 - 1e-6)) + spec.spread * (effect * offsets[regimes] + shift))
        return (rng.random(regimes.shape[0]) < probability).astype(float)

    def emotion_labels(self, regimes: np.ndarray, config: CohortConfig, rng: np.random.Generator) -> np.ndarray:
        """Regime-driven valence labels (0 negative, 1 neutral, 2 positive), -1 when unreported"""
        dominant = np.array([0, 2, 1])[regimes % 3]
        labels = dominant.copy()
        flip = rng.random(regimes.shape[0]) >= config.label_purity
        shifts = rng.integers(1, 3, size=regimes.shape[0])
        labels[flip] = (dominant[flip] + shifts[flip]) % 3
        reported = rng.random(regimes.shape[0]) >= config.label_missing_rate
        return np.where(reported, labels, -1)

    def generate_cohort(
        self, config: CohortConfig, catalog: Optional[Sequence[VariableSpec]] = None
    ) -> Tuple[List[TimeSeriesSample], CohortTruth]:
        """Generate a cohort of original-space samples and its ground truth"""
        catalog = list(catalog or self.catalog)
        if config.lengths.max_length < config.lengths.min_length:
            raise DataValidationError(
                "Degenerate length distribution",
                min_length=config.lengths.min_length,
                max_length=config.lengths.max_length,
            )

        names = [spec.name for spec in catalog]
        samples: List[TimeSeriesSample] = []
        truth = CohortTruth()
        width = len(str(config.n_patients - 1))
        for p in range(config.n_patients):
            patient_id = f"P{p:0{width}d}"
            rng = numpy_rng(derive_seed(config.seed, f"datagen.patient.{patient_id}"))
            n_days = int(rng.integers(config.lengths.min_length, config.lengths.max_length + 1))
            start = config.start_date + timedelta(days=int(rng.integers(7)))
            regimes = self.sample_regimes(n_days, config, rng)

            values = np.empty((len(catalog), n_days))
            mask = np.ones((len(catalog), n_days), dtype=np.int8)
            for i, spec in enumerate(catalog):
                if spec.calendar:
                    values[i] = [float((start + timedelta(days=t)).weekday() >= 5) for t in range(n_days)]
                    continue
                offsets = self.regime_offsets(spec, i, config.regime.n_regimes)
                shift = rng.normal(0.0, config.patient_shift) if config.patient_shift > 0 else 0.0
                values[i] = self._emit(spec, offsets, regimes, shift, config.regime.effect_size, rng)
                rate = min(spec.missing_rate * config.missingness_scale, 1.0)
                missing = rng.random(n_days) < rate
                mask[i, missing] = MaskCode.MISSING
            values[mask == MaskCode.MISSING] = np.nan

            day_index = np.arange(n_days)
            if config.gap_probability > 0 and rng.random() < config.gap_probability and n_days > 60:
                gap_start = int(rng.integers(n_days // 4, n_days // 2))
                gap_length = int(rng.integers(7, 22))
                keep = (day_index < gap_start) | (day_index >= gap_start + gap_length)
                day_index, values, mask = day_index[keep], values[:, keep], mask[:, keep]

            change_points = [int(t) for t in np.flatnonzero(np.diff(regimes)) + 1]
            events = [t + config.event_lag for t in change_points if t + config.event_lag < n_days]
            truth.patients[patient_id] = PatientTruth(
                patient_id=patient_id,
                regimes=regimes.tolist(),
                change_points=change_points,
                events=events,
                emotions=self.emotion_labels(regimes, config, rng).tolist(),
            )
            samples.append(
                TimeSeriesSample(
                    patient_id=patient_id,
                    start_date=start,
                    day_index=day_index,
                    variables=names,
                    values=values,
                    mask=mask,
                )
            )

        logger.info(f"Generated cohort of {len(samples)} patients (seed {config.seed})")
        return samples, truth

    # ------------------------------------------------------------------
    # Preprocessing
    # ------------------------------------------------------------------

    def clip_and_flag(self, sample: TimeSeriesSample, catalog: Optional[Sequence[VariableSpec]] = None) -> TimeSeriesSample:
        """Treat out-of-bounds observations as missing"""
        if sample.space != Space.ORIGINAL:
            raise DataValidationError("clip_and_flag expects original-space samples", sample=sample.sample_id)
        specs = self._catalog_map(catalog)
        values, mask = sample.values.copy(), sample.mask.copy()
        flagged = 0
        for i, name in enumerate(sample.variables):
            spec = specs.get(name)
            if spec is None:
                continue
            observed = mask[i] == MaskCode.OBSERVED
            outside = np.zeros_like(observed)
            with np.errstate(invalid="ignore"):
                if spec.clip_min is not None:
                    outside |= values[i] < spec.clip_min
                if spec.clip_max is not None:
                    outside |= values[i] > spec.clip_max
            outside &= observed
            values[i, outside] = np.nan
            mask[i, outside] = MaskCode.MISSING
            flagged += int(outside.sum())
        if flagged:
            logger.debug(f"Clipped {flagged} out-of-bounds entries in {sample.sample_id}")
        return sample.with_arrays(values=values, mask=mask)

    def split_on_gaps(self, sample: TimeSeriesSample, min_length: int) -> List[TimeSeriesSample]:
        """Split a record into date-contiguous sequences, dropping short fragments"""
        if min_length < 1:
            raise DataValidationError("min_length must be at least 1", min_length=min_length)
        breaks = np.flatnonzero(np.diff(sample.day_index) != 1) + 1
        pieces: List[TimeSeriesSample] = []
        for segment, positions in enumerate(np.split(np.arange(sample.n_days), breaks)):
            if positions.size < min_length:
                logger.debug(f"Dropping {positions.size}-day fragment of {sample.patient_id}")
                continue
            pieces.append(
                sample.with_arrays(
                    segment=segment,
                    day_index=sample.day_index[positions],
                    values=sample.values[:, positions],
                    mask=sample.mask[:, positions],
                )
            )
        return pieces

    def binarize_mask(self, mask: np.ndarray) -> np.ndarray:
        return (np.asarray(mask) == MaskCode.OBSERVED).astype(np.int8)

    def fit_scaler(
        self, samples: Sequence[TimeSeriesSample], catalog: Optional[Sequence[VariableSpec]] = None
    ) -> RobustScalerState:
        """Fit median / IQR scaling on observed training values"""
        if not samples:
            raise DataValidationError("Cannot fit a scaler on an empty training set")
        variables = list(samples[0].variables)
        for sample in samples:
            if sample.variables != variables:
                raise ScalerMismatchError("Training samples disagree on the variable catalog")
            if sample.space != Space.ORIGINAL:
                raise DataValidationError("fit_scaler expects original-space samples", sample=sample.sample_id)

        stacked = np.concatenate(
            [np.where(s.mask == MaskCode.OBSERVED, s.values, np.nan) for s in samples], axis=1
        ).T
        specs = self._catalog_map(catalog)
        scaled = [
            specs[name].value_type != ValueType.BINARY if name in specs else True for name in variables
        ]
        median = np.zeros(len(variables))
        iqr = np.ones(len(variables))
        columns = [i for i, flag in enumerate(scaled) if flag and np.isfinite(stacked[:, i]).any()]
        if columns:
            # RobustScaler ignores NaN and maps a zero IQR to a unit scale
            scaler = RobustScaler(quantile_range=(25.0, 75.0)).fit(stacked[:, columns])
            median[columns] = scaler.center_
            iqr[columns] = scaler.scale_
        return RobustScalerState(variables=variables, median=median.tolist(), iqr=iqr.tolist(), scaled=scaled)

    def _check_scaler(self, sample: TimeSeriesSample, state: RobustScalerState) -> Tuple[np.ndarray, np.ndarray]:
        if list(sample.variables) != state.variables:
            raise ScalerMismatchError(
                "Scaler was fitted on a different variable catalog",
                expected=state.variables,
                got=list(sample.variables),
            )
        return np.asarray(state.median)[:, None], np.asarray(state.iqr)[:, None]

    def apply_scaler(self, sample: TimeSeriesSample, state: RobustScalerState) -> TimeSeriesSample:
        if sample.space != Space.ORIGINAL:
            raise DataValidationError("apply_scaler expects an original-space sample", sample=sample.sample_id)
        median, iqr = self._check_scaler(sample, state)
        values = (sample.values - median) / iqr
        values = np.where(sample.mask == MaskCode.MISSING, 0.0, values)
        return sample.with_arrays(values=values, space=Space.SCALED)

    def invert_scaler(self, sample: TimeSeriesSample, state: RobustScalerState) -> TimeSeriesSample:
        if sample.space != Space.SCALED:
            raise DataValidationError("invert_scaler requires a scaled sample", sample=sample.sample_id)
        median, iqr = self._check_scaler(sample, state)
        values = sample.values * iqr + median
        values = np.where(sample.mask == MaskCode.MISSING, np.nan, values)
        return sample.with_arrays(values=values, space=Space.ORIGINAL)

    def _eligible(self, name: str, specs: Dict[str, VariableSpec]) -> bool:
        spec = specs.get(name)
        return spec is None or spec.synthetic_missingness

    def corrupt_mcar(
        self,
        sample: TimeSeriesSample,
        seed: int,
        config: Optional[CorruptionConfig] = None,
        catalog: Optional[Sequence[VariableSpec]] = None,
    ) -> TimeSeriesSample:
        """Flag a flat share of observed entries as synthetically missing"""
        config = config or CorruptionConfig()
        specs = self._catalog_map(catalog)
        rng = numpy_rng(derive_seed(seed, f"datagen.mcar.{sample.sample_id}"))
        mask = sample.mask.copy()
        n_days = sample.n_days
        for i, name in enumerate(sample.variables):
            if not self._eligible(name, specs):
                continue
            n_missing = int((mask[i] != MaskCode.OBSERVED).sum())
            if n_missing / n_days > config.ceiling:
                continue
            observed = np.flatnonzero(mask[i] == MaskCode.OBSERVED)
            budget = max(int(np.floor(config.ceiling * n_days)) - n_missing, 0)
            k = min(int(rng.binomial(observed.size, config.mcar_rate)), budget)
            if k:
                mask[i, rng.choice(observed, size=k, replace=False)] = MaskCode.SYNTHETIC
        return sample.with_arrays(mask=mask, corruption=Corruption.MCAR)

    def default_mnar_rules(self, catalog: Optional[Sequence[VariableSpec]] = None) -> List[MnarRule]:
        return [MnarRule(variable=spec.name) for spec in (catalog or self.catalog) if spec.synthetic_missingness]

    def corrupt_mnar(
        self,
        sample: TimeSeriesSample,
        seed: int,
        rules: Optional[Sequence[MnarRule]] = None,
        config: Optional[CorruptionConfig] = None,
        catalog: Optional[Sequence[VariableSpec]] = None,
    ) -> TimeSeriesSample:
        """Value-dependent missingness on quantile tails plus a small random component"""
        config = config or CorruptionConfig()
        specs = self._catalog_map(catalog)
        if rules is None:
            rules = config.mnar_rules if config.mnar_rules is not None else self.default_mnar_rules(catalog)
        by_variable: Dict[str, MnarRule] = {}
        for rule in rules:
            if rule.variable not in sample.variables:
                raise UnknownVariableError(rule.variable, list(sample.variables))
            by_variable[rule.variable] = rule

        rng = numpy_rng(derive_seed(seed, f"datagen.mnar.{sample.sample_id}"))
        mask = sample.mask.copy()
        n_days = sample.n_days
        for i, name in enumerate(sample.variables):
            if not self._eligible(name, specs):
                continue
            n_missing = int((mask[i] != MaskCode.OBSERVED).sum())
            budget = max(int(np.floor(config.ceiling * n_days)) - n_missing, 0)
            observed = np.flatnonzero(mask[i] == MaskCode.OBSERVED)
            if budget == 0 or observed.size == 0:
                continue

            rule = by_variable.get(name)
            if rule is not None:
                column = sample.values[i, observed]
                tail = np.zeros(observed.size, dtype=bool)
                if rule.lower_quantile is not None:
                    tail |= column < np.quantile(column, rule.lower_quantile)
                if rule.upper_quantile is not None:
                    tail |= column > np.quantile(column, rule.upper_quantile)
                chosen = observed[tail & (rng.random(observed.size) < rule.probability)]
                if chosen.size > budget:
                    chosen = rng.choice(chosen, size=budget, replace=False)
                mask[i, chosen] = MaskCode.SYNTHETIC
                budget -= chosen.size
                observed = np.flatnonzero(mask[i] == MaskCode.OBSERVED)

            k = min(int(rng.binomial(observed.size, config.mnar_random_rate)), budget)
            if k:
                mask[i, rng.choice(observed, size=k, replace=False)] = MaskCode.SYNTHETIC
        return sample.with_arrays(mask=mask, corruption=Corruption.MNAR)

    def partition_patients(
        self, patient_ids: Iterable[str], config: PartitionConfig, seed: int
    ) -> List[Partition]:
        """Patient-level train / validation / test assignments, one per partition index"""
        ids = sorted(set(patient_ids))
        if len(ids) < 1:
            raise DataValidationError("No patients to partition")
        partitions = []
        for index in range(config.n_partitions):
            rng = numpy_rng(derive_seed(seed, f"datagen.partition.{index}"))
            order = [ids[j] for j in rng.permutation(len(ids))]
            n_test = int(round(config.test * len(ids)))
            n_val = int(round(config.validation * len(ids)))
            if n_test + n_val >= len(ids):
                n_val = max(len(ids) - n_test - 1, 0)
            test = sorted(order[:n_test])
            validation = sorted(order[n_test:n_test + n_val])
            train = sorted(order[n_test + n_val:])
            partitions.append(Partition(index=index, train=train, validation=validation, test=test))
        return partitions

    def random_crop(self, sample: TimeSeriesSample, length: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Random window of `length` days; shorter samples are zero-padded with mask 0"""
        n_features = len(sample.variables)
        if sample.n_days <= length:
            values = np.zeros((n_features, length))
            mask = np.zeros((n_features, length), dtype=np.int8)
            values[:, : sample.n_days] = sample.values
            mask[:, : sample.n_days] = sample.mask
            return values, mask
        start = int(rng.integers(sample.n_days - length + 1))
        return sample.values[:, start:start + length], sample.mask[:, start:start + length]

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def sample_frame(self, sample: TimeSeriesSample) -> pd.DataFrame:
        frame = pd.DataFrame({"day_index": sample.day_index})
        frame["date"] = [(sample.start_date + timedelta(days=int(d))).isoformat() for d in sample.day_index]
        for i, name in enumerate(sample.variables):
            frame[name] = sample.values[i]
        for i, name in enumerate(sample.variables):
            frame[f"mask:{name}"] = sample.mask[i].astype(int)
        return frame

    def save_samples(self, directory: Path, samples: Sequence[TimeSeriesSample]) -> None:
        """One CSV per sample plus an index with sample metadata"""
        directory = Path(directory)
        index = []
        for sample in samples:
            filename = f"{sample.sample_id}.csv"
            write_csv(directory / filename, self.sample_frame(sample))
            index.append(
                {
                    "file": filename,
                    "patient_id": sample.patient_id,
                    "segment": sample.segment,
                    "start_date": sample.start_date.isoformat(),
                    "space": sample.space.value,
                    "corruption": sample.corruption.value,
                }
            )
        write_json(directory / "samples.json", index)

    def read_sample_csv(
        self,
        path: Path,
        patient_id: str,
        start_date: date,
        variables: Optional[Sequence[str]] = None,
        segment: int = 0,
        space: Space = Space.ORIGINAL,
        corruption: Corruption = Corruption.NONE,
    ) -> TimeSeriesSample:
        """Read a sample CSV; mask columns are optional and default to NaN-derived codes"""
        frame = read_csv(path)
        if "day_index" not in frame.columns:
            raise DataValidationError(f"{path} has no day_index column", path=str(path))
        if variables is None:
            variables = [c for c in frame.columns if c not in ("day_index", "date") and not c.startswith("mask:")]
        missing = [name for name in variables if name not in frame.columns]
        if missing:
            raise UnknownVariableError(missing[0], list(frame.columns))
        values = frame[list(variables)].to_numpy(dtype=float).T
        if all(f"mask:{name}" in frame.columns for name in variables):
            mask = frame[[f"mask:{name}" for name in variables]].to_numpy(dtype=np.int8).T
        else:
            mask = np.where(np.isnan(values), MaskCode.MISSING, MaskCode.OBSERVED).astype(np.int8)
        return TimeSeriesSample(
            patient_id=patient_id,
            segment=segment,
            start_date=start_date,
            day_index=frame["day_index"].to_numpy(dtype=np.int64),
            variables=list(variables),
            values=values,
            mask=mask,
            space=space,
            corruption=corruption,
        )

    def load_samples(self, directory: Path) -> List[TimeSeriesSample]:
        directory = Path(directory)
        samples = []
        for entry in read_json(directory / "samples.json"):
            samples.append(
                self.read_sample_csv(
                    directory / entry["file"],
                    patient_id=entry["patient_id"],
                    start_date=date.fromisoformat(entry["start_date"]),
                    segment=int(entry["segment"]),
                    space=Space(entry["space"]),
                    corruption=Corruption(entry["corruption"]),
                )
            )
        return samples

    def events_frame(self, truth: CohortTruth) -> pd.DataFrame:
        rows = [
            {"patient_id": pid, "day_index": day}
            for pid, patient in sorted(truth.patients.items())
            for day in patient.events
        ]
        return pd.DataFrame(rows, columns=["patient_id", "day_index"])


# Global datagen service instance
datagen_service = DatagenService()
