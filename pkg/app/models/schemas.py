from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any
from datetime import date, datetime
from enum import Enum, IntEnum

import numpy as np


class ValueType(str, Enum):
    REAL = "real"
    POSITIVE_REAL = "positive_real"
    COUNT = "count"
    BINARY = "binary"


class MaskCode(IntEnum):
    MISSING = 0
    OBSERVED = 1
    SYNTHETIC = 2


class Space(str, Enum):
    ORIGINAL = "original"
    SCALED = "scaled"


class Corruption(str, Enum):
    NONE = "none"
    MCAR = "mcar"
    MNAR = "mnar"


class LayerKind(str, Enum):
    CONV1D = "conv1d"
    DECONV1D = "deconv1d"
    BATCHNORM1D = "batchnorm1d"
    RELU = "relu"
    IDENTITY = "identity"
    MAXPOOL1D = "maxpool1d"
    DROPOUT = "dropout"
    LINEAR = "linear"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class LossKind(str, Enum):
    MASKED_MSE = "masked_mse"
    WEIGHTED_BCE_LOGITS = "weighted_bce_logits"
    CROSS_ENTROPY = "cross_entropy"


class Variant(str, Enum):
    IMPLICIT = "implicit"
    E1 = "E1"
    E2 = "E2"


class ProfileMode(str, Enum):
    DISCRETE = "discrete"
    PROBABILISTIC = "probabilistic"


class CPDVariant(str, Enum):
    HIERARCHICAL = "hierarchical"
    MULTINOMIAL = "multinomial"
    MULTIVARIATE = "multivariate"


class AlarmMethod(str, Enum):
    MAP_RATIO = "map_ratio"
    MAP_DIFF = "map_diff"
    CUMULATIVE_SUM = "cumulative_sum"


class Direction(str, Enum):
    ABOVE = "above"
    BELOW = "below"


class CumSumSource(str, Enum):
    MAP_RUN_LENGTH = "map_run_length"
    EXPECTED_RUN_LENGTH = "expected_run_length"


class EmbeddingSource(str, Enum):
    HARD = "hard"
    SOFT = "soft"


# ---------------------------------------------------------------------------
# Data generation and preprocessing
# ---------------------------------------------------------------------------


class VariableSpec(BaseModel):
    name: str
    value_type: ValueType
    clip_min: Optional[float] = None
    clip_max: Optional[float] = None
    missing_rate: float = Field(0.0, ge=0.0, le=1.0, description="Baseline natural missing rate")
    location: float = Field(0.0, description="Regime-free centre of the generative distribution")
    spread: float = Field(1.0, gt=0.0, description="Within-regime spread (original units)")
    regime_offsets: List[float] = Field(
        default_factory=list,
        description="Per-regime shift in units of spread; empty means evenly spaced in [-1, 1]",
    )
    synthetic_missingness: bool = True
    calendar: bool = False

    @model_validator(mode="after")
    def _check_bounds(self) -> "VariableSpec":
        if self.value_type == ValueType.BINARY:
            if self.clip_min is not None or self.clip_max is not None:
                raise ValueError(f"binary variable {self.name} cannot carry clip bounds")
        if self.clip_min is not None and self.clip_max is not None and self.clip_min >= self.clip_max:
            raise ValueError(f"clip_min must be below clip_max for {self.name}")
        return self


class LengthDistribution(BaseModel):
    model_config = ConfigDict(extra="forbid")

    min_length: int = Field(120, ge=1)
    max_length: int = Field(200, ge=1)


class RegimeModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_regimes: int = Field(2, ge=1)
    switch_rate: float = Field(0.03, ge=0.0, lt=1.0)
    min_dwell: int = Field(14, ge=1, description="Minimum days spent in a regime before it may switch")
    effect_size: float = Field(1.0, ge=0.0, description="Regime shift in units of each variable's spread")


class CohortConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    n_patients: int = Field(20, ge=1)
    lengths: LengthDistribution = Field(default_factory=LengthDistribution)
    regime: RegimeModel = Field(default_factory=RegimeModel)
    missingness_scale: float = Field(1.0, ge=0.0, description="Multiplier on every baseline missing rate")
    label_missing_rate: float = Field(0.96, ge=0.0, le=1.0)
    label_purity: float = Field(0.9, gt=0.0, le=1.0)
    event_lag: int = Field(7, ge=0, description="Days from a regime change to its clinical event")
    gap_probability: float = Field(0.0, ge=0.0, le=1.0, description="Chance that a record loses a block of days")
    patient_shift: float = Field(0.25, ge=0.0, description="Per-patient baseline offset in units of spread")
    start_date: date = date(2019, 3, 15)


class TimeSeriesSample(BaseModel):
    """One contiguous multivariate record: values and trinary mask are F x T"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    patient_id: str
    segment: int = 0
    start_date: date
    day_index: np.ndarray
    variables: List[str]
    values: np.ndarray
    mask: np.ndarray
    space: Space = Space.ORIGINAL
    corruption: Corruption = Corruption.NONE

    @model_validator(mode="after")
    def _check_shapes(self) -> "TimeSeriesSample":
        n_vars = len(self.variables)
        if self.values.shape != self.mask.shape:
            raise ValueError(f"values shape {self.values.shape} differs from mask shape {self.mask.shape}")
        if self.values.ndim != 2 or self.values.shape[0] != n_vars:
            raise ValueError(f"expected {n_vars} x T values, got {self.values.shape}")
        if self.day_index.shape != (self.values.shape[1],):
            raise ValueError("day_index length must equal the number of days")
        if not np.isin(self.mask, (0, 1, 2)).all():
            raise ValueError("mask entries must be 0, 1 or 2")
        return self

    @property
    def sample_id(self) -> str:
        return self.patient_id if self.segment == 0 else f"{self.patient_id}-s{self.segment}"

    @property
    def n_days(self) -> int:
        return int(self.values.shape[1])

    def with_arrays(self, **changes: Any) -> "TimeSeriesSample":
        """Copy with replaced fields; arrays are always copied"""
        data = {
            "patient_id": self.patient_id,
            "segment": self.segment,
            "start_date": self.start_date,
            "day_index": self.day_index.copy(),
            "variables": list(self.variables),
            "values": self.values.copy(),
            "mask": self.mask.copy(),
            "space": self.space,
            "corruption": self.corruption,
        }
        data.update(changes)
        return TimeSeriesSample(**data)


class PatientTruth(BaseModel):
    patient_id: str
    regimes: List[int]
    change_points: List[int] = Field(default_factory=list, description="Days whose regime differs from the previous day")
    events: List[int] = Field(default_factory=list, description="Synthetic clinical event days")
    emotions: List[int] = Field(default_factory=list, description="Per-day valence label, -1 when unreported")


class CohortTruth(BaseModel):
    patients: Dict[str, PatientTruth] = Field(default_factory=dict)


class RobustScalerState(BaseModel):
    variables: List[str]
    median: List[float]
    iqr: List[float]
    scaled: List[bool]


class MnarRule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variable: str
    lower_quantile: Optional[float] = Field(0.05, ge=0.0, le=1.0)
    upper_quantile: Optional[float] = Field(0.95, ge=0.0, le=1.0)
    probability: float = Field(0.7, ge=0.0, le=1.0)


class CorruptionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mcar_rate: float = Field(0.10, ge=0.0, le=1.0)
    mnar_random_rate: float = Field(0.02, ge=0.0, le=1.0)
    ceiling: float = Field(0.85, ge=0.0, le=1.0)
    mnar_rules: Optional[List[MnarRule]] = None


class PartitionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: float = Field(0.6, gt=0.0)
    validation: float = Field(0.2, ge=0.0)
    test: float = Field(0.2, ge=0.0)
    n_partitions: int = Field(1, ge=1)
    partition_index: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_fractions(self) -> "PartitionConfig":
        if abs(self.train + self.validation + self.test - 1.0) > 1e-9:
            raise ValueError("partition fractions must sum to 1")
        if self.partition_index >= self.n_partitions:
            raise ValueError("partition_index must be below n_partitions")
        return self


class Partition(BaseModel):
    index: int
    train: List[str]
    validation: List[str]
    test: List[str]


class CohortManifest(BaseModel):
    format_version: int = 1
    seed: int
    config: Dict[str, Any] = Field(default_factory=dict)
    catalog: List[VariableSpec]
    samples: List[str]
    truth: CohortTruth
    space: Space = Space.ORIGINAL
    created_at: datetime = Field(default_factory=datetime.utcnow)


# ---------------------------------------------------------------------------
# Differentiable kernel
# ---------------------------------------------------------------------------


class LayerSpec(BaseModel):
    kind: LayerKind
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    pool_kernel: int = 2
    p: float = Field(0.0, ge=0.0, lt=1.0)
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    momentum: float = 0.1
    eps: float = 1e-5

    @model_validator(mode="after")
    def _check_kind(self) -> "LayerSpec":
        if self.kind in (LayerKind.CONV1D, LayerKind.DECONV1D):
            if self.in_channels is None or self.out_channels is None:
                raise ValueError(f"{self.kind.value} requires in_channels and out_channels")
            if (self.kernel_size, self.stride, self.padding) != (3, 1, 1):
                raise ValueError("conv blocks must use kernel 3, stride 1, padding 1 to preserve length")
        if self.kind == LayerKind.BATCHNORM1D and self.in_channels is None:
            raise ValueError("batchnorm1d requires in_channels")
        if self.kind == LayerKind.LINEAR and (self.in_features is None or self.out_features is None):
            raise ValueError("linear requires in_features and out_features")
        return self


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    algorithm: str = "adam"
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    clip_norm: Optional[float] = Field(2.0, gt=0.0)
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    plateau_factor: float = Field(0.1, gt=0.0, lt=1.0)
    plateau_patience: int = Field(10, ge=0)

    @field_validator("algorithm")
    @classmethod
    def _only_adam(cls, v: str) -> str:
        if v != "adam":
            raise ValueError("only the adam optimizer is supported")
        return v


class GradCheckReport(BaseModel):
    max_rel_err: float
    passed: bool
    tolerance: float
    per_tensor: Dict[str, float] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# VQ model
# ---------------------------------------------------------------------------


class VQTrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: Variant = Variant.IMPLICIT
    embedding_dim: int = Field(80, ge=1)
    codebook_size: int = Field(256, ge=2)
    beta: float = Field(0.25, ge=0.0)
    ema_decay: float = Field(0.99, gt=0.0, le=1.0)
    ema_epsilon: float = 1e-5
    restart_threshold: float = Field(0.1, ge=0.0)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(16, ge=1)
    crop_length: int = Field(64, ge=4)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    seed: int = 0


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None
    perplexity: float
    lr: float
    restarts: int = 0


class VariableMetrics(BaseModel):
    variable: str
    value_type: ValueType
    xo_mae: Optional[float] = None
    mcar_mae: Optional[float] = None
    mnar_mae: Optional[float] = None
    f1: Optional[float] = None
    baseline_xo_mae: Optional[float] = None
    baseline_mcar_mae: Optional[float] = None
    baseline_mnar_mae: Optional[float] = None


class ReconstructionReport(BaseModel):
    variant: Variant
    variables: List[VariableMetrics]


class ProfileSequence(BaseModel):
    sample_id: str
    mode: ProfileMode
    codes: List[int] = Field(description="Raw codeword index per day")
    profile_ids: List[int] = Field(description="Rank-remapped profile per day, dummy_id for rare codes")
    probabilities: Optional[List[List[float]]] = None
    code_ranking: List[int] = Field(description="Codes kept as individual profiles, most frequent first")
    n_profiles: int
    dummy_id: int

    @property
    def alphabet_size(self) -> int:
        return self.dummy_id + 1


# ---------------------------------------------------------------------------
# Change-point detection
# ---------------------------------------------------------------------------


class HazardSpec(BaseModel):
    lam: float = Field(..., gt=1.0)

    @property
    def hazard(self) -> float:
        return 1.0 / self.lam


class PruningConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    threshold: float = Field(1e-12, ge=0.0)
    max_hypotheses: Optional[int] = Field(None, ge=1)


class CPDModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: CPDVariant = CPDVariant.HIERARCHICAL
    alpha: float = Field(1.0, gt=0.0)
    samples: int = Field(5, ge=1, description="Multinomial draws per day (S)")
    kappa0: float = Field(1.0, gt=0.0)
    prior_window: int = Field(7, ge=1, description="Days averaged for the NIW prior mean")


class AlarmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: AlarmMethod = AlarmMethod.MAP_RATIO
    threshold: float = 0.5
    window: int = Field(7, ge=1)
    direction: Direction = Direction.ABOVE
    warmup: Optional[int] = Field(None, ge=0)
    cumsum_source: CumSumSource = CumSumSource.MAP_RUN_LENGTH

    @field_validator("threshold")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("threshold must be finite")
        return v


class ConfusionCounts(BaseModel):
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp, fn=self.fn + other.fn, fp=self.fp + other.fp, tn=self.tn + other.tn
        )

    @property
    def sensitivity(self) -> float:
        total = self.tp + self.fn
        return self.tp / total if total else 0.0

    @property
    def fpr(self) -> float:
        total = self.fp + self.tn
        return self.fp / total if total else 0.0


class RocPoint(BaseModel):
    threshold: float
    fpr: float
    tpr: float


class RocCurve(BaseModel):
    lam: Optional[float] = None
    method: AlarmMethod
    window: int
    points: List[RocPoint]
    auc: float


# ---------------------------------------------------------------------------
# Downstream
# ---------------------------------------------------------------------------


class ClassifierSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    window: int = Field(7, ge=1)
    conv_channels: List[int] = Field(default_factory=lambda: [32, 64])
    hidden_units: int = 128
    n_classes: int = 3
    conv_dropout: float = Field(0.25, ge=0.0, lt=1.0)
    linear_dropout: float = Field(0.10, ge=0.0, lt=1.0)
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = Field(10, ge=1)
    min_delta: float = Field(0.0, ge=0.0, description="Validation loss decrease that counts as an improvement")
    validation_fraction: float = Field(0.3, ge=0.0, lt=1.0)
    lr: float = 1e-3
    weight_decay: float = 1e-3
    class_weights: bool = False


class ClassifierEpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None
    train_accuracy: float


class AblationCell(BaseModel):
    variant: Variant
    embedding_dim: int
    codebook_size: int
    n_profiles: int
    samples: int
    window: int
    lambdas: List[float]
    cpd_variant: CPDVariant
    profile_mode: ProfileMode
    seed: int
    cohort_hash: str = ""
    event_auc: Optional[float] = None
    event_auc_per_lambda: Dict[str, float] = Field(default_factory=dict)
    emotion_weighted_auc: Optional[float] = None

    @property
    def key(self) -> str:
        return (
            f"{self.variant.value}-d{self.embedding_dim}-w{self.codebook_size}"
            f"-m{self.n_profiles}-{self.cpd_variant.value}-seed{self.seed}"
        )


# ---------------------------------------------------------------------------
# Command configs and provenance
# ---------------------------------------------------------------------------


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    workdir: str = "demo"
    seed: Optional[int] = None


class SynthConfig(RunConfig):
    cohort: CohortConfig = Field(default_factory=CohortConfig)


class PreprocessConfig(RunConfig):
    min_length: int = Field(28, ge=1)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    corruption: CorruptionConfig = Field(default_factory=CorruptionConfig)


class TrainVQRunConfig(RunConfig):
    model: VQTrainConfig = Field(default_factory=VQTrainConfig)
    checkpoint_name: str = "checkpoint.pt"


class ProfileRunConfig(RunConfig):
    checkpoint_name: str = "checkpoint.pt"
    n_profiles: int = Field(20, ge=1)
    mode: ProfileMode = ProfileMode.PROBABILISTIC
    splits: List[str] = Field(default_factory=lambda: ["test"])


class CPDRunConfig(RunConfig):
    model: CPDModelConfig = Field(default_factory=CPDModelConfig)
    lambdas: List[float] = Field(default_factory=lambda: [10.0, 1e3, 1e5, 1e7])
    pruning: PruningConfig = Field(default_factory=PruningConfig)
    dump_posteriors: bool = False


class EvalEventsRunConfig(RunConfig):
    alarm: AlarmConfig = Field(default_factory=AlarmConfig)
    thresholds: Optional[List[float]] = None


class EmotionRunConfig(RunConfig):
    classifier: ClassifierSpec = Field(default_factory=ClassifierSpec)
    embedding_source: EmbeddingSource = EmbeddingSource.HARD
    checkpoint_name: str = "checkpoint.pt"


class AblationGrid(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variants: List[Variant] = Field(default_factory=lambda: [Variant.IMPLICIT])
    embedding_dims: List[int] = Field(default_factory=lambda: [80])
    codebook_sizes: List[int] = Field(default_factory=lambda: [256])
    n_profiles: List[int] = Field(default_factory=lambda: [20])
    lambdas: List[float] = Field(default_factory=lambda: [10.0, 1e3, 1e5, 1e7])
    cpd_variant: CPDVariant = CPDVariant.HIERARCHICAL
    profile_mode: ProfileMode = ProfileMode.DISCRETE
    samples: int = 5
    window: int = 7


class AblateRunConfig(RunConfig):
    grid: AblationGrid = Field(default_factory=AblationGrid)
    seeds: List[int] = Field(default_factory=lambda: [0])
    training: VQTrainConfig = Field(default_factory=VQTrainConfig)
    alarm: AlarmConfig = Field(default_factory=AlarmConfig)
    classifier: ClassifierSpec = Field(default_factory=ClassifierSpec)
    emotion: bool = True
    max_workers: Optional[int] = Field(None, ge=1)
    train_missing: bool = Field(True, description="Train cell checkpoints that do not exist yet")


class VerifyRunConfig(RunConfig):
    grad_seeds: int = Field(20, ge=1)
    oracle_sequences: int = Field(50, ge=1)
    oracle_length: int = Field(8, ge=1, le=12)
    quantizer_queries: int = Field(100_000, ge=1)
    codebook_sizes: List[int] = Field(default_factory=lambda: [256, 512, 1024])
    replay: Optional[str] = None


class ReportRunConfig(RunConfig):
    pass


class RunManifest(BaseModel):
    command: str
    format_version: int = 1
    config: Dict[str, Any]
    input_hashes: Dict[str, str] = Field(default_factory=dict)
    output_hashes: Dict[str, str] = Field(default_factory=dict)
    artifact_versions: Dict[str, int] = Field(default_factory=dict)
    started_at: datetime
    finished_at: datetime
    wall_clock_s: float
    metrics: Dict[str, Any] = Field(default_factory=dict)


class ErrorRecord(BaseModel):
    error: str
    message: str
    command: Optional[str] = None
    details: Dict[str, Any] = Field(default_factory=dict)
    timestamp: datetime = Field(default_factory=datetime.utcnow)
