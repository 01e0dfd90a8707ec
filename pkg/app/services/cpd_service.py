import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from sklearn.metrics import auc

from ..core.errors import DataValidationError, EventRangeError, OracleLimitError, PredictiveError
from ..core.seeding import derive_seed, numpy_rng
from ..core.storage import load_posteriors, save_posteriors
from ..models.schemas import (
    AlarmConfig,
    AlarmMethod,
    ConfusionCounts,
    CPDModelConfig,
    CPDVariant,
    CumSumSource,
    Direction,
    HazardSpec,
    ProfileSequence,
    PruningConfig,
    RocCurve,
    RocPoint,
)
from .cpd_models import ConjugateModel, build_observation_model
import logging

logger = logging.getLogger(__name__)

ORACLE_MAX_LENGTH = 12


@dataclass
class RunLengthPosterior:
    """Sparse run-length posterior: row t holds the surviving hypotheses after z_1..z_{t+1}"""

    run_lengths: List[np.ndarray] = field(default_factory=list)
    log_probs: List[np.ndarray] = field(default_factory=list)
    log_evidence: float = 0.0

    def __len__(self) -> int:
        return len(self.run_lengths)

    def row(self, t: int) -> np.ndarray:
        dense = np.zeros(len(self) + 1)
        dense[self.run_lengths[t]] = np.exp(self.log_probs[t])
        return dense

    def to_dense(self) -> np.ndarray:
        """T x (T+1) matrix of p(r_t | z_1..z_t)"""
        dense = np.zeros((len(self), len(self) + 1))
        for t, (rl, lp) in enumerate(zip(self.run_lengths, self.log_probs)):
            dense[t, rl] = np.exp(lp)
        return dense

    @property
    def map_path(self) -> np.ndarray:
        # rows are sorted by run length, so argmax ties resolve to the shorter run
        return np.array([int(rl[np.argmax(lp)]) for rl, lp in zip(self.run_lengths, self.log_probs)], dtype=np.int64)

    @property
    def expected_run_length(self) -> np.ndarray:
        return np.array([float(np.dot(rl, np.exp(lp))) for rl, lp in zip(self.run_lengths, self.log_probs)])

    @property
    def change_probability(self) -> np.ndarray:
        return np.array([float(np.exp(lp[0])) if rl[0] == 0 else 0.0 for rl, lp in zip(self.run_lengths, self.log_probs)])

    def frame(self, sample_id: str = "") -> pd.DataFrame:
        return pd.DataFrame(
            {
                "sample_id": sample_id,
                "day": np.arange(len(self)),
                "map_run_length": self.map_path,
                "expected_run_length": self.expected_run_length,
                "p_change": self.change_probability,
            }
        )


class BayesianOnlineDetector:
    """Online run-length recursion over one sequence"""

    def __init__(self, model: ConjugateModel, lam: float, pruning: Optional[PruningConfig] = None):
        self.model = model
        self.hazard = HazardSpec(lam=lam).hazard
        self.pruning = pruning or PruningConfig()
        self.reset()

    def reset(self) -> None:
        self.model.reset()
        self.run_lengths = np.zeros(1, dtype=np.int64)
        self.log_row = np.zeros(1)
        self.posterior = RunLengthPosterior()

    def update(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Absorb one observation and return (run lengths, probabilities) of the new row"""
        self.run_lengths, self.log_row, log_evidence = cpd_service.bocpd_step(
            self.model, self.run_lengths, self.log_row, x, self.hazard, self.pruning
        )
        self.posterior.run_lengths.append(self.run_lengths)
        self.posterior.log_probs.append(self.log_row)
        self.posterior.log_evidence += log_evidence
        return self.run_lengths, np.exp(self.log_row)


class CPDService:
    def bocpd_step(
        self,
        model: ConjugateModel,
        run_lengths: np.ndarray,
        log_prev: np.ndarray,
        x,
        hazard: float,
        pruning: Optional[PruningConfig] = None,
    ) -> Tuple[np.ndarray, np.ndarray, float]:
        """One recursion step in log space; advances the model's statistics in place"""
        log_pred = model.log_predictive(x)
        bad = np.flatnonzero(~np.isfinite(log_pred))
        if bad.size:
            index = int(bad[0])
            logger.error(f"Non-finite predictive for run length {run_lengths[index]}")
            raise PredictiveError(int(run_lengths[index]), float(log_pred[index]))

        weighted = log_pred + log_prev
        growth = np.log1p(-hazard) + weighted
        change = np.log(hazard) + logsumexp(weighted)
        new_run_lengths = np.concatenate([[0], run_lengths + 1])
        log_joint = np.concatenate([[change], growth])
        log_evidence = float(logsumexp(log_joint))
        log_row = log_joint - log_evidence

        keep = self._surviving(log_row, pruning)
        model.advance(x, keep)
        if keep is not None:
            new_run_lengths, log_row = new_run_lengths[keep], log_row[keep]
            log_row = log_row - logsumexp(log_row)
        return new_run_lengths, log_row, log_evidence

    def _surviving(self, log_row: np.ndarray, pruning: Optional[PruningConfig]) -> Optional[np.ndarray]:
        if pruning is None or not pruning.enabled:
            return None
        keep = log_row >= np.log(pruning.threshold) if pruning.threshold > 0 else np.ones(log_row.size, dtype=bool)
        keep[0] = True
        if pruning.max_hypotheses is not None and keep.sum() > pruning.max_hypotheses:
            ranked = np.argsort(-log_row[1:], kind="stable")[: pruning.max_hypotheses - 1] + 1
            keep = np.zeros(log_row.size, dtype=bool)
            keep[0] = True
            keep[ranked] = True
        if keep.all():
            return None
        return np.flatnonzero(keep)

    def run(
        self,
        observations: Sequence,
        model: ConjugateModel,
        lam: float,
        pruning: Optional[PruningConfig] = None,
    ) -> RunLengthPosterior:
        """Filter a whole sequence; pruning disabled by passing PruningConfig(enabled=False)"""
        if len(observations) == 0:
            raise DataValidationError("Cannot run change-point detection on an empty sequence")
        detector = BayesianOnlineDetector(model, lam, pruning)
        for x in observations:
            detector.update(x)
        return detector.posterior

    def brute_force_oracle(self, observations: Sequence, model: ConjugateModel, lam: float) -> np.ndarray:
        """Exact posterior by enumerating every reset pattern; only for short sequences"""
        n = len(observations)
        if n == 0:
            raise DataValidationError("Cannot run the oracle on an empty sequence")
        if n > ORACLE_MAX_LENGTH:
            raise OracleLimitError(
                f"Oracle enumeration limited to {ORACLE_MAX_LENGTH} observations", length=n
            )
        hazard = HazardSpec(lam=lam).hazard
        log_h, log_1mh = np.log(hazard), np.log1p(-hazard)
        marginal = {
            (i, j): model.segment_log_marginal(observations[i : j + 1]) for i in range(n) for j in range(i, n)
        }

        posterior = np.zeros((n, n + 1))
        for t in range(1, n + 1):
            by_run_length: Dict[int, List[float]] = {}
            for resets in itertools.product((False, True), repeat=t):
                log_weight, start = 0.0, 0
                for s, reset in enumerate(resets):
                    if reset:
                        log_weight += log_h + marginal[(start, s)]
                        start = s + 1
                    else:
                        log_weight += log_1mh
                if start < t:
                    log_weight += marginal[(start, t - 1)]
                by_run_length.setdefault(t - start, []).append(log_weight)
            run_lengths = np.array(sorted(by_run_length))
            log_mass = np.array([logsumexp(by_run_length[r]) for r in run_lengths])
            posterior[t - 1, run_lengths] = np.exp(log_mass - logsumexp(log_mass))
        return posterior

    def sample_profiles(self, probabilities: np.ndarray, samples: int, seed: int) -> np.ndarray:
        """Multinomial draw of `samples` profiles from one day's pseudo-probability vector"""
        probabilities = np.asarray(probabilities, dtype=np.float64)
        if probabilities.ndim != 1 or not np.isclose(probabilities.sum(), 1.0, atol=1e-6):
            raise DataValidationError("Pseudo-probabilities must be a vector summing to 1")
        probabilities = np.clip(probabilities, 0.0, None)
        return numpy_rng(seed).multinomial(samples, probabilities / probabilities.sum()).astype(float)

    def prepare_observations(
        self, profile: ProfileSequence, variant: CPDVariant, config: CPDModelConfig, seed: int = 0
    ) -> np.ndarray:
        """Turn a profile sequence into the observation type each variant consumes"""
        if variant == CPDVariant.HIERARCHICAL:
            return np.asarray(profile.profile_ids, dtype=np.int64)

        if profile.probabilities is not None:
            vectors = np.asarray(profile.probabilities, dtype=np.float64)
        else:
            vectors = np.eye(profile.alphabet_size)[np.asarray(profile.profile_ids, dtype=np.int64)]
        if variant == CPDVariant.MULTIVARIATE:
            return vectors
        base = derive_seed(seed, f"cpd.samples.{profile.sample_id}")
        return np.stack(
            [self.sample_profiles(vector, config.samples, derive_seed(base, str(t))) for t, vector in enumerate(vectors)]
        )

    def run_profile(
        self,
        profile: ProfileSequence,
        config: CPDModelConfig,
        lam: float,
        pruning: Optional[PruningConfig] = None,
        seed: int = 0,
    ) -> RunLengthPosterior:
        observations = self.prepare_observations(profile, config.variant, config, seed)
        model = build_observation_model(config.variant, config, profile.alphabet_size, observations)
        posterior = self.run(observations, model, lam, pruning)
        logger.debug(f"{profile.sample_id}: lambda {lam:g}, log evidence {posterior.log_evidence:.3f}")
        return posterior

    def _warmup(self, config: AlarmConfig) -> int:
        if config.warmup is not None:
            return config.warmup
        return config.window if config.method == AlarmMethod.CUMULATIVE_SUM else 1

    def alarm_scores(self, posterior: RunLengthPosterior, config: AlarmConfig) -> np.ndarray:
        """Per-day statistic that the alarm threshold is compared against"""
        return self.score_series(posterior.map_path, posterior.expected_run_length, config)

    def score_series(self, map_path: np.ndarray, expected_run_length: np.ndarray, config: AlarmConfig) -> np.ndarray:
        map_path = np.asarray(map_path, dtype=float)
        previous = np.concatenate([[0.0], map_path[:-1]])
        if config.method == AlarmMethod.MAP_RATIO:
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = map_path / previous
            guard = previous == 0
            ratio[guard] = np.where(map_path[guard] > 0, np.inf, 1.0)
            return ratio
        if config.method == AlarmMethod.MAP_DIFF:
            return map_path - previous
        source = map_path if config.cumsum_source == CumSumSource.MAP_RUN_LENGTH else np.asarray(expected_run_length, dtype=float)
        # window of W + 1 days ending at t, truncated at the start of the sequence
        cumulative = np.concatenate([[0.0], np.cumsum(source)])
        starts = np.maximum(np.arange(source.size) - config.window, 0)
        return cumulative[1:] - cumulative[starts]

    def fires_below(self, config: AlarmConfig) -> bool:
        """Whether low scores raise alarms; map_ratio always alarms on a drop"""
        return config.method == AlarmMethod.MAP_RATIO or config.direction == Direction.BELOW

    def alarms_from_scores(self, scores: np.ndarray, config: AlarmConfig, threshold: Optional[float] = None) -> np.ndarray:
        threshold = config.threshold if threshold is None else threshold
        fired = scores < threshold if self.fires_below(config) else scores > threshold
        fired[: self._warmup(config)] = False
        return fired

    def alarms(self, posterior: RunLengthPosterior, config: AlarmConfig) -> np.ndarray:
        return self.alarms_from_scores(self.alarm_scores(posterior, config), config)

    def evaluate_events(self, alarms: np.ndarray, events: Sequence[int], window: int = 7) -> ConfusionCounts:
        """Credit each alarm to at most one event whose window (e - W, e] contains it"""
        alarms = np.asarray(alarms, dtype=bool)
        n_days = alarms.size
        events = sorted(int(e) for e in events)
        for e in events:
            if not 0 <= e < n_days:
                raise EventRangeError(f"Event day {e} outside sequence of {n_days} days", event=e, n_days=n_days)

        in_window = np.zeros(n_days, dtype=bool)
        for e in events:
            in_window[max(e - window + 1, 0) : e + 1] = True

        available = alarms.copy()
        tp = 0
        # earliest deadline first, each event takes its earliest unused alarm
        for e in events:
            candidates = np.flatnonzero(available[max(e - window + 1, 0) : e + 1])
            if candidates.size:
                available[max(e - window + 1, 0) + candidates[0]] = False
                tp += 1
        return ConfusionCounts(
            tp=tp,
            fn=len(events) - tp,
            fp=int((alarms & ~in_window).sum()),
            tn=int((~alarms & ~in_window).sum()),
        )

    def roc_from_scores(
        self,
        scores: Sequence[np.ndarray],
        events: Sequence[Sequence[int]],
        config: AlarmConfig,
        thresholds: Optional[Sequence[float]] = None,
        lam: Optional[float] = None,
    ) -> RocCurve:
        """Pool confusion counts over sequences for every threshold and integrate the curve"""
        if thresholds is None:
            finite = np.concatenate([s[np.isfinite(s)] for s in scores]) if scores else np.empty(0)
            thresholds = np.unique(finite).tolist()
        thresholds = sorted(float(t) for t in thresholds if np.isfinite(t))
        low = (thresholds[0] if thresholds else 0.0) - 1.0
        high = (thresholds[-1] if thresholds else 0.0) + 1.0

        # sentinels: a threshold that never fires and one that always does
        silent, loud = (low, high) if self.fires_below(config) else (high, low)
        points = [RocPoint(threshold=silent, fpr=0.0, tpr=0.0)]
        for threshold in thresholds:
            total = ConfusionCounts()
            for sequence_scores, sequence_events in zip(scores, events):
                fired = self.alarms_from_scores(np.asarray(sequence_scores, dtype=float), config, threshold)
                total = total + self.evaluate_events(fired, sequence_events, config.window)
            points.append(RocPoint(threshold=threshold, fpr=total.fpr, tpr=total.sensitivity))
        points.append(RocPoint(threshold=loud, fpr=1.0, tpr=1.0))

        points.sort(key=lambda p: (p.fpr, p.tpr))
        area = float(auc([p.fpr for p in points], [p.tpr for p in points]))
        return RocCurve(lam=lam, method=config.method, window=config.window, points=points, auc=area)

    def roc_sweep(
        self,
        posteriors: Sequence[RunLengthPosterior],
        events: Sequence[Sequence[int]],
        config: AlarmConfig,
        thresholds: Optional[Sequence[float]] = None,
        lam: Optional[float] = None,
    ) -> RocCurve:
        scores = [self.alarm_scores(posterior, config) for posterior in posteriors]
        curve = self.roc_from_scores(scores, events, config, thresholds, lam)
        logger.info(f"ROC {config.method.value} lambda {lam}: AUC {curve.auc:.4f} over {len(curve.points)} points")
        return curve

    def save_posterior_dump(self, path: Path, posteriors: Dict[str, RunLengthPosterior]) -> None:
        """Flatten sparse rows of several sequences into one compressed dump"""
        arrays: Dict[str, np.ndarray] = {"sample_ids": np.array(list(posteriors), dtype=str)}
        for i, posterior in enumerate(posteriors.values()):
            arrays[f"run_lengths_{i}"] = np.concatenate(posterior.run_lengths)
            arrays[f"log_probs_{i}"] = np.concatenate(posterior.log_probs)
            arrays[f"row_sizes_{i}"] = np.array([rl.size for rl in posterior.run_lengths], dtype=np.int64)
            arrays[f"log_evidence_{i}"] = np.array(posterior.log_evidence)
        save_posteriors(path, arrays)

    def load_posterior_dump(self, path: Path) -> Dict[str, RunLengthPosterior]:
        arrays = load_posteriors(path)
        posteriors = {}
        for i, sample_id in enumerate(arrays["sample_ids"].tolist()):
            bounds = np.cumsum(arrays[f"row_sizes_{i}"])[:-1]
            posteriors[sample_id] = RunLengthPosterior(
                run_lengths=np.split(arrays[f"run_lengths_{i}"], bounds),
                log_probs=np.split(arrays[f"log_probs_{i}"], bounds),
                log_evidence=float(arrays[f"log_evidence_{i}"]),
            )
        return posteriors


# Global CPD service instance
cpd_service = CPDService()
