import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy.special import expit
from sklearn.metrics import f1_score
from tqdm import tqdm

from ..core.errors import DataValidationError, TrainingDivergedError
from ..core.seeding import derive_seed, numpy_rng, seeded_torch, torch_generator
from ..core.storage import load_checkpoint, save_checkpoint
from ..models.schemas import (
    EpochRecord,
    MaskCode,
    ProfileMode,
    ProfileSequence,
    ReconstructionReport,
    RobustScalerState,
    Space,
    TimeSeriesSample,
    ValueType,
    VariableMetrics,
    VariableSpec,
    VQTrainConfig,
)
from .datagen_service import datagen_service
from .numkernel import PlateauScheduler, numkernel
from .quantizer import Codebook, perplexity_from_counts
from .vq_model import VQModel, VQOutput
import logging

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    reconstruction: torch.Tensor
    commitment: torch.Tensor
    empty_variables: int = 0


@dataclass
class TrainingResult:
    model: VQModel
    history: List[EpochRecord]
    optimizer_state: dict = field(default_factory=dict)


@dataclass
class EncodedSample:
    sample_id: str
    z_e: np.ndarray  # [L, d]
    codes: np.ndarray  # [L]
    probabilities: np.ndarray  # [L, K]


def _tensors(values: np.ndarray, mask: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(np.nan_to_num(values, nan=0.0), dtype=torch.float32)
    m = torch.as_tensor(mask, dtype=torch.int64)
    return x, m


class VQService:
    def binary_flags(self, variables: Sequence[str], catalog: Optional[Sequence[VariableSpec]] = None) -> List[bool]:
        specs = {spec.name: spec for spec in (catalog or datagen_service.catalog)}
        return [name in specs and specs[name].value_type == ValueType.BINARY for name in variables]

    def build_model(self, config: VQTrainConfig, n_features: int, seed: int = 0) -> VQModel:
        """Build a model with reproducible weight initialisation"""
        with seeded_torch(derive_seed(seed, "vq.init")):
            model = VQModel(
                config.variant,
                n_features,
                embedding_dim=config.embedding_dim,
                codebook_size=config.codebook_size,
                decay=config.ema_decay,
                epsilon=config.ema_epsilon,
            )
        if config.embedding_dim != 8 * n_features:
            logger.info(f"Final encoder block widened to d={config.embedding_dim} (8F={8 * n_features})")
        return model

    def loss_terms(
        self, output: VQOutput, target: torch.Tensor, mask: torch.Tensor, binary: Sequence[bool], beta: float
    ) -> LossBreakdown:
        """Per-variable reconstruction losses on observed entries plus the commitment term"""
        reconstruction = output.reconstruction.new_zeros(())
        empty = 0
        for f, is_binary in enumerate(binary):
            if is_binary:
                term = numkernel.weighted_bce_logits(output.reconstruction[:, f], target[:, f], mask[:, f])
            else:
                term = numkernel.masked_mse(output.reconstruction[:, f], target[:, f], mask[:, f])
            empty += int(term.empty)
            reconstruction = reconstruction + term.value
        total, commitment = self.vq_loss_terms(output.z_e, output.quantized.codewords, reconstruction, beta)
        return LossBreakdown(total=total, reconstruction=reconstruction, commitment=commitment, empty_variables=empty)

    def vq_loss_terms(
        self, z_e: torch.Tensor, codewords: torch.Tensor, reconstruction: torch.Tensor, beta: float
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Reconstruction + beta * ||z_e - sg[e_k]||^2; the codebook itself moves by EMA"""
        commitment = F.mse_loss(z_e, codewords.detach())
        return reconstruction + beta * commitment, commitment

    def train(
        self,
        train_samples: Sequence[TimeSeriesSample],
        config: VQTrainConfig,
        binary: Sequence[bool],
        validation_samples: Optional[Sequence[TimeSeriesSample]] = None,
        model: Optional[VQModel] = None,
    ) -> TrainingResult:
        """Train on random crops of scaled samples; EMA updates the codebook"""
        if not train_samples:
            raise DataValidationError("No training samples")
        if any(s.space != Space.SCALED for s in train_samples):
            raise DataValidationError("Training expects scaled samples")
        n_features = len(train_samples[0].variables)
        if len(binary) != n_features:
            raise DataValidationError("Binary flags do not match the variable count")

        model = model or self.build_model(config, n_features, config.seed)
        crop_rng = numpy_rng(derive_seed(config.seed, "vq.crops"))
        restart_generator = torch_generator(derive_seed(config.seed, "vq.restart"))
        optimizer = numkernel.make_optimizer(model, config.optimizer)
        scheduler = PlateauScheduler(optimizer, config.optimizer.plateau_factor, config.optimizer.plateau_patience)
        codebook: Codebook = model.codebook

        history: List[EpochRecord] = []
        epochs = tqdm(range(config.epochs), desc=f"train {config.variant.value}", disable=not sys.stderr.isatty(), leave=False)
        for epoch in epochs:
            model.train()
            order = crop_rng.permutation(len(train_samples))
            losses: List[float] = []
            donors = None
            for batch, start in enumerate(range(0, len(order), config.batch_size)):
                crops = [
                    datagen_service.random_crop(train_samples[i], config.crop_length, crop_rng)
                    for i in order[start:start + config.batch_size]
                ]
                x, m = _tensors(np.stack([c[0] for c in crops]), np.stack([c[1] for c in crops]))

                if not bool(codebook.initialized):
                    with torch.no_grad():
                        codebook.initialize_from(model.encode(x, m), restart_generator)

                output = model(x, m)
                loss = self.loss_terms(output, x, m, binary, config.beta)
                if not torch.isfinite(loss.total):
                    logger.error(f"Training diverged at epoch {epoch}, batch {batch}")
                    raise TrainingDivergedError(epoch, batch, float(loss.total))
                if loss.empty_variables:
                    logger.debug(f"{loss.empty_variables} fully missing variables in batch {batch}")

                numkernel.backward(numkernel.attach(loss.total, model))
                numkernel.optimize_step(optimizer)

                flat = codebook.flatten(output.z_e.detach())
                codebook.ema_update(flat, output.quantized.indices)
                codebook.record_usage(output.quantized.counts)
                donors = flat
                losses.append(float(loss.total))

            perplexity = perplexity_from_counts(codebook.usage)
            restarts = codebook.restart_dead_codes(donors, config.restart_threshold, restart_generator)
            train_loss = float(np.mean(losses))
            val_loss = self.evaluate_loss(model, validation_samples, binary, config.beta) if validation_samples else None
            lr = scheduler.step(val_loss if val_loss is not None else train_loss)
            record = EpochRecord(
                epoch=epoch, train_loss=train_loss, val_loss=val_loss, perplexity=perplexity, lr=lr, restarts=restarts
            )
            history.append(record)
            logger.info(
                f"epoch {epoch}: loss {train_loss:.4f} val {val_loss if val_loss is None else round(val_loss, 4)} "
                f"perplexity {perplexity:.2f} lr {lr:.2e} restarts {restarts}"
            )

        model.eval()
        return TrainingResult(model=model, history=history, optimizer_state=optimizer.state_dict())

    @torch.no_grad()
    def evaluate_loss(
        self, model: VQModel, samples: Sequence[TimeSeriesSample], binary: Sequence[bool], beta: float
    ) -> float:
        """Mean full-sequence loss in eval mode"""
        model.eval()
        losses = []
        for sample in samples:
            x, m = _tensors(sample.values[None], sample.mask[None])
            losses.append(float(self.loss_terms(model(x, m), x, m, binary, beta).total))
        return float(np.mean(losses)) if losses else float("nan")

    @torch.no_grad()
    def reconstruct(self, model: VQModel, sample: TimeSeriesSample) -> np.ndarray:
        model.eval()
        x, m = _tensors(sample.values[None], sample.mask[None])
        return model(x, m).reconstruction[0].double().numpy()

    @torch.no_grad()
    def encode_sample(self, model: VQModel, sample: TimeSeriesSample) -> EncodedSample:
        model.eval()
        x, m = _tensors(sample.values[None], sample.mask[None])
        z_e = model.encode(x, m)
        quantized = model.codebook.quantize(z_e)
        return EncodedSample(
            sample_id=sample.sample_id,
            z_e=z_e[0].t().double().numpy(),
            codes=quantized.indices[0].numpy(),
            probabilities=self.pseudo_probabilities(z_e, model.codebook),
        )

    def pseudo_probabilities(self, z_e: torch.Tensor, codebook: Codebook) -> np.ndarray:
        """Per-position softmax of negative Euclidean distances, rows sum to 1"""
        with torch.no_grad():
            return codebook.pseudo_probabilities(z_e).numpy()

    def profile_sequence(
        self,
        codes: np.ndarray,
        n_profiles: int,
        mode: ProfileMode = ProfileMode.DISCRETE,
        probabilities: Optional[np.ndarray] = None,
        sample_id: str = "",
    ) -> ProfileSequence:
        """Rank codes by frequency; the top `n_profiles` become profiles, the rest the dummy class"""
        codes = np.asarray(codes, dtype=np.int64)
        if n_profiles < 1:
            raise DataValidationError("n_profiles must be positive", n_profiles=n_profiles)
        used, counts = np.unique(codes, return_counts=True)
        # most frequent first, lower code index on ties
        ranked = used[np.lexsort((used, -counts))]
        top = ranked[:n_profiles]
        dummy_id = int(top.size)
        rank = {int(code): i for i, code in enumerate(top)}
        profile_ids = [rank.get(int(code), dummy_id) for code in codes]

        vectors = None
        if mode == ProfileMode.PROBABILISTIC:
            if probabilities is None:
                raise DataValidationError("Probabilistic profiles require pseudo-probabilities")
            probabilities = np.asarray(probabilities, dtype=np.float64)
            kept = probabilities[:, top]
            rest = np.ones(probabilities.shape[1], dtype=bool)
            rest[top] = False
            compressed = np.concatenate([kept, probabilities[:, rest].sum(axis=1, keepdims=True)], axis=1)
            compressed /= compressed.sum(axis=1, keepdims=True)
            vectors = compressed.tolist()

        return ProfileSequence(
            sample_id=sample_id,
            mode=mode,
            codes=codes.tolist(),
            profile_ids=profile_ids,
            probabilities=vectors,
            code_ranking=[int(c) for c in top],
            n_profiles=dummy_id,
            dummy_id=dummy_id,
        )

    def variable_metrics(
        self,
        name: str,
        value_type: ValueType,
        subsets: Dict[str, Tuple[np.ndarray, np.ndarray]],
        median: float,
    ) -> VariableMetrics:
        """MAE per subset (None when empty) with a constant-median baseline; F1 for binary variables"""
        metrics = VariableMetrics(variable=name, value_type=value_type)
        if value_type == ValueType.BINARY:
            true, pred = subsets.get("xo", (np.empty(0), np.empty(0)))
            if true.size:
                metrics.f1 = float(f1_score(np.round(true).astype(int), pred.astype(int), zero_division=0))
            return metrics
        for subset, (true, pred) in subsets.items():
            if not true.size:
                continue
            setattr(metrics, f"{subset}_mae", float(np.mean(np.abs(pred - true))))
            setattr(metrics, f"baseline_{subset}_mae", float(np.mean(np.abs(median - true))))
        return metrics

    def _to_original(self, values: np.ndarray, f: int, scaler: RobustScalerState) -> np.ndarray:
        return values * scaler.iqr[f] + scaler.median[f]

    def _postprocess(self, prediction: np.ndarray, value_type: ValueType) -> np.ndarray:
        if value_type == ValueType.BINARY:
            return (expit(prediction) > 0.5).astype(float)
        if value_type == ValueType.COUNT:
            return np.maximum(np.round(prediction), 0.0)
        if value_type == ValueType.POSITIVE_REAL:
            return np.maximum(prediction, 0.0)
        return prediction

    def reconstruction_metrics(
        self,
        model: VQModel,
        scaler: RobustScalerState,
        clean: Sequence[TimeSeriesSample],
        mcar: Optional[Sequence[TimeSeriesSample]] = None,
        mnar: Optional[Sequence[TimeSeriesSample]] = None,
        catalog: Optional[Sequence[VariableSpec]] = None,
    ) -> ReconstructionReport:
        """Score reconstructions in original space on observed and synthetically hidden entries"""
        specs = {spec.name: spec for spec in (catalog or datagen_service.catalog)}
        variables = scaler.variables
        collected: Dict[str, Dict[str, Tuple[List[np.ndarray], List[np.ndarray]]]] = {
            name: {"xo": ([], []), "mcar": ([], []), "mnar": ([], [])} for name in variables
        }
        for subset, samples, code in (("xo", clean, MaskCode.OBSERVED), ("mcar", mcar or [], MaskCode.SYNTHETIC), ("mnar", mnar or [], MaskCode.SYNTHETIC)):
            for sample in samples:
                prediction = self.reconstruct(model, sample)
                for f, name in enumerate(variables):
                    selected = sample.mask[f] == code
                    if not selected.any():
                        continue
                    value_type = specs[name].value_type if name in specs else ValueType.REAL
                    true = self._to_original(sample.values[f, selected], f, scaler)
                    if value_type == ValueType.BINARY:
                        pred = self._postprocess(prediction[f, selected], value_type)
                    else:
                        pred = self._postprocess(self._to_original(prediction[f, selected], f, scaler), value_type)
                    collected[name][subset][0].append(true)
                    collected[name][subset][1].append(pred)

        rows = []
        for f, name in enumerate(variables):
            value_type = specs[name].value_type if name in specs else ValueType.REAL
            subsets = {
                subset: (
                    np.concatenate(true) if true else np.empty(0),
                    np.concatenate(pred) if pred else np.empty(0),
                )
                for subset, (true, pred) in collected[name].items()
            }
            rows.append(self.variable_metrics(name, value_type, subsets, scaler.median[f]))
        return ReconstructionReport(variant=model.variant, variables=rows)

    def codebook_usage(self, encoded: Sequence[EncodedSample], codebook_size: int) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """Per-sample distinct-code counts and the global usage distribution"""
        per_sample = pd.DataFrame(
            [
                {"sample_id": e.sample_id, "n_days": int(e.codes.size), "distinct_codes": int(np.unique(e.codes).size)}
                for e in encoded
            ],
            columns=["sample_id", "n_days", "distinct_codes"],
        )
        all_codes = np.concatenate([e.codes for e in encoded]) if encoded else np.empty(0, dtype=np.int64)
        counts = np.bincount(all_codes.astype(np.int64), minlength=codebook_size)
        usage = pd.DataFrame({"code": np.arange(codebook_size), "count": counts})
        return per_sample, usage

    def save_model(
        self,
        path: Path,
        result: TrainingResult,
        config: VQTrainConfig,
        variables: Sequence[str],
        binary: Sequence[bool],
        scaler: RobustScalerState,
    ) -> None:
        save_checkpoint(
            path,
            {"state_dict": result.model.state_dict(), "optimizer": result.optimizer_state},
            config=config.model_dump(mode="json"),
            variables=list(variables),
            binary=list(binary),
            scaler=scaler.model_dump(mode="json"),
            history=[record.model_dump(mode="json") for record in result.history],
        )

    def load_model(self, path: Path) -> Tuple[VQModel, dict]:
        container = load_checkpoint(path)
        metadata = container["metadata"]
        config = VQTrainConfig.model_validate(metadata["config"])
        model = self.build_model(config, len(metadata["variables"]), config.seed)
        model.load_state_dict(container["state_dict"])
        model.eval()
        return model, metadata


# Global VQ service instance
vq_service = VQService()
