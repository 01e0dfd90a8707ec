import copy
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import GroupShuffleSplit, train_test_split
from tqdm import tqdm

from ..core.errors import InsufficientClassesError, ShapeMismatchError
from ..core.seeding import derive_seed, numpy_rng, seeded_torch
from ..core.storage import load_checkpoint, save_checkpoint
from ..models.schemas import (
    ClassifierEpochRecord,
    ClassifierSpec,
    EmbeddingSource,
    LayerKind,
    LayerSpec,
    OptimizerConfig,
)
from .numkernel import numkernel
from .vq_service import EncodedSample
import logging

logger = logging.getLogger(__name__)


@dataclass
class EmotionWindows:
    """Stack of W x d day-embedding windows with the label of the following day"""

    inputs: np.ndarray  # [N, W, d]
    labels: np.ndarray  # [N]
    sample_ids: List[str] = field(default_factory=list)
    patient_ids: List[str] = field(default_factory=list)
    days: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: np.ndarray) -> "EmotionWindows":
        return EmotionWindows(
            inputs=self.inputs[index],
            labels=self.labels[index],
            sample_ids=[self.sample_ids[i] for i in index],
            patient_ids=[self.patient_ids[i] for i in index],
            days=[self.days[i] for i in index],
        )


@dataclass
class EmotionTrainingResult:
    model: "EmotionCNN"
    history: List[ClassifierEpochRecord]
    best_epoch: int
    stopped_early: bool


def classifier_specs(spec: ClassifierSpec, embedding_dim: int) -> List[LayerSpec]:
    """Two conv stages (conv, ReLU, max-pool, batchnorm, dropout) then two linear layers"""
    specs: List[LayerSpec] = []
    channels = [spec.window] + list(spec.conv_channels)
    length = embedding_dim
    for in_channels, out_channels in zip(channels[:-1], channels[1:]):
        specs += [
            LayerSpec(kind=LayerKind.CONV1D, in_channels=in_channels, out_channels=out_channels),
            LayerSpec(kind=LayerKind.RELU),
            LayerSpec(kind=LayerKind.MAXPOOL1D, pool_kernel=2),
            LayerSpec(kind=LayerKind.BATCHNORM1D, in_channels=out_channels),
            LayerSpec(kind=LayerKind.DROPOUT, p=spec.conv_dropout),
        ]
        length //= 2
    specs += [
        LayerSpec(kind=LayerKind.LINEAR, in_features=channels[-1] * length, out_features=spec.hidden_units),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.DROPOUT, p=spec.linear_dropout),
        LayerSpec(kind=LayerKind.LINEAR, in_features=spec.hidden_units, out_features=spec.n_classes),
    ]
    return specs


class EmotionCNN(nn.Module):
    """1-D CNN over a window of day embeddings, one channel per day"""

    def __init__(self, spec: ClassifierSpec, embedding_dim: int):
        super().__init__()
        if embedding_dim < 2 ** len(spec.conv_channels):
            raise ShapeMismatchError("emotion_cnn", f"embedding_dim >= {2 ** len(spec.conv_channels)}", embedding_dim)
        self.spec = spec
        self.embedding_dim = embedding_dim
        self.layers = numkernel.build_stack(classifier_specs(spec, embedding_dim), prefix="cnn")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class EmotionService:
    def day_embeddings(
        self, encoded: EncodedSample, codebook: np.ndarray, source: EmbeddingSource = EmbeddingSource.HARD
    ) -> np.ndarray:
        """Per-day codebook vector, or the pseudo-probability mixture of codebook vectors"""
        codebook = np.asarray(codebook, dtype=np.float64)
        if source == EmbeddingSource.SOFT:
            if encoded.probabilities.shape[1] != codebook.shape[0]:
                raise ShapeMismatchError(
                    "day_embeddings", [encoded.probabilities.shape[0], codebook.shape[0]], list(encoded.probabilities.shape)
                )
            return encoded.probabilities @ codebook
        if encoded.codes.size and (encoded.codes.min() < 0 or encoded.codes.max() >= codebook.shape[0]):
            raise ShapeMismatchError("day_embeddings", f"codes < {codebook.shape[0]}", int(encoded.codes.max()))
        return codebook[encoded.codes]

    def build_windows(
        self,
        embeddings: Mapping[str, np.ndarray],
        labels: Mapping[str, np.ndarray],
        window: int = 7,
        patient_of: Optional[Mapping[str, str]] = None,
        days: Optional[Mapping[str, np.ndarray]] = None,
    ) -> EmotionWindows:
        """Windows of `window` consecutive days whose following day carries a label"""
        inputs, targets, sample_ids, patient_ids, target_days = [], [], [], [], []
        dims = {value.shape[1] for value in embeddings.values() if value.size}
        if len(dims) > 1:
            raise ShapeMismatchError("build_windows", "one embedding dimension", sorted(dims))
        for sample_id, embedding in embeddings.items():
            sample_labels = np.asarray(labels.get(sample_id, []), dtype=np.int64)
            if sample_labels.shape[0] != embedding.shape[0]:
                raise ShapeMismatchError("build_windows", [embedding.shape[0]], list(sample_labels.shape))
            for target in np.flatnonzero(sample_labels >= 0):
                if target < window:
                    continue
                inputs.append(embedding[target - window : target])
                targets.append(int(sample_labels[target]))
                sample_ids.append(sample_id)
                patient_ids.append((patient_of or {}).get(sample_id, sample_id))
                target_days.append(int(days[sample_id][target]) if days is not None else int(target))

        dim = dims.pop() if dims else 0
        windows = EmotionWindows(
            inputs=np.stack(inputs) if inputs else np.empty((0, window, dim)),
            labels=np.asarray(targets, dtype=np.int64),
            sample_ids=sample_ids,
            patient_ids=patient_ids,
            days=target_days,
        )
        logger.info(f"Built {len(windows)} emotion windows from {len(embeddings)} samples")
        return windows

    def _split(self, windows: EmotionWindows, spec: ClassifierSpec, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """Hold out whole patients; windows are split directly when too few patients remain for training"""
        index = np.arange(len(windows))
        n_val = int(round(spec.validation_fraction * len(windows)))
        if n_val < 1 or len(windows) - n_val < 1:
            return index, np.empty(0, dtype=np.int64)
        random_state = derive_seed(seed, "emotion.split") % (2**32)
        groups = np.asarray(windows.patient_ids or windows.sample_ids)
        n_groups = np.unique(groups).size
        if groups.size == len(windows) and 1 <= n_groups - math.ceil(spec.validation_fraction * n_groups):
            splitter = GroupShuffleSplit(n_splits=1, test_size=spec.validation_fraction, random_state=random_state)
            train, validation = next(splitter.split(index, groups=groups))
            return np.sort(train), np.sort(validation)

        logger.warning(f"Too few patients ({n_groups}) to hold one out, validation split is made over windows")
        _, counts = np.unique(windows.labels, return_counts=True)
        stratify = windows.labels if counts.min() >= 2 and min(n_val, len(windows) - n_val) >= counts.size else None
        train, validation = train_test_split(index, test_size=n_val, random_state=random_state, stratify=stratify)
        return np.sort(train), np.sort(validation)

    def _class_weights(self, labels: np.ndarray, n_classes: int) -> torch.Tensor:
        counts = np.bincount(labels, minlength=n_classes).astype(float)
        weights = np.where(counts > 0, labels.size / (n_classes * np.maximum(counts, 1.0)), 0.0)
        return torch.as_tensor(weights, dtype=torch.float32)

    def train_emotion_cnn(self, windows: EmotionWindows, spec: ClassifierSpec, seed: int = 0) -> EmotionTrainingResult:
        """Cross-entropy training with early stopping on the validation loss"""
        classes = np.unique(windows.labels)
        if classes.size < 2:
            logger.error(f"Emotion training needs two classes, got {classes.tolist()}")
            raise InsufficientClassesError("At least two emotion classes are required", classes=classes.tolist())

        train_index, val_index = self._split(windows, spec, seed)
        x = torch.as_tensor(windows.inputs, dtype=torch.float32)
        y = torch.as_tensor(windows.labels, dtype=torch.long)
        weights = self._class_weights(windows.labels[train_index], spec.n_classes) if spec.class_weights else None

        with seeded_torch(derive_seed(seed, "emotion.init")):
            model = EmotionCNN(spec, windows.inputs.shape[2])
        optimizer = numkernel.make_optimizer(
            model, OptimizerConfig(lr=spec.lr, weight_decay=spec.weight_decay, clip_norm=None)
        )
        order_rng = numpy_rng(derive_seed(seed, "emotion.batches"))

        history: List[ClassifierEpochRecord] = []
        best_loss, best_state, best_epoch, flat = float("inf"), None, 0, 0
        stopped_early = False
        with seeded_torch(derive_seed(seed, "emotion.dropout")):
            epochs = tqdm(range(spec.max_epochs), desc="emotion", disable=not sys.stderr.isatty(), leave=False)
            for epoch in epochs:
                model.train()
                order = train_index[order_rng.permutation(train_index.size)]
                losses, correct = [], 0
                for start in range(0, order.size, spec.batch_size):
                    batch = order[start : start + spec.batch_size]
                    if batch.size < 2:
                        # batchnorm cannot normalise a single window
                        continue
                    logits = model(x[batch])
                    loss = numkernel.cross_entropy(logits, y[batch], weights).value
                    numkernel.backward(numkernel.attach(loss, model))
                    numkernel.optimize_step(optimizer)
                    losses.append(float(loss) * batch.size)
                    correct += int((logits.argmax(dim=1) == y[batch]).sum())

                train_loss = float(np.sum(losses) / max(order.size, 1))
                val_loss = self._loss(model, x[val_index], y[val_index], weights) if val_index.size else None
                monitored = val_loss if val_loss is not None else train_loss
                history.append(
                    ClassifierEpochRecord(
                        epoch=epoch, train_loss=train_loss, val_loss=val_loss, train_accuracy=correct / max(order.size, 1)
                    )
                )
                if monitored < best_loss - spec.min_delta or best_state is None:
                    best_loss, best_state, best_epoch, flat = monitored, copy.deepcopy(model.state_dict()), epoch, 0
                else:
                    flat += 1
                    if flat >= spec.patience:
                        stopped_early = True
                        logger.info(f"Early stopping at epoch {epoch}, best epoch {best_epoch}")
                        break

        model.load_state_dict(best_state)
        model.eval()
        logger.info(f"Emotion classifier trained for {len(history)} epochs on {train_index.size} windows")
        return EmotionTrainingResult(model=model, history=history, best_epoch=best_epoch, stopped_early=stopped_early)

    @torch.no_grad()
    def _loss(self, model: EmotionCNN, x: torch.Tensor, y: torch.Tensor, weights: Optional[torch.Tensor]) -> float:
        model.eval()
        return float(numkernel.cross_entropy(model(x), y, weights).value)

    @torch.no_grad()
    def predict(self, model: EmotionCNN, inputs: np.ndarray) -> np.ndarray:
        """Class probabilities, rows sum to 1"""
        model.eval()
        if len(inputs) == 0:
            return np.empty((0, model.spec.n_classes))
        logits = model(torch.as_tensor(inputs, dtype=torch.float32)).double()
        return torch.softmax(logits, dim=1).numpy()

    def accuracy(self, model: EmotionCNN, windows: EmotionWindows) -> float:
        if not len(windows):
            return 0.0
        return float(np.mean(self.predict(model, windows.inputs).argmax(axis=1) == windows.labels))

    def weighted_auc(self, scores: np.ndarray, labels: np.ndarray) -> float:
        """One-vs-rest AUC per present class, averaged with class-support weights"""
        labels = np.asarray(labels, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        classes, support = np.unique(labels, return_counts=True)
        if classes.size < 2:
            raise InsufficientClassesError("Weighted AUC needs at least two classes", classes=classes.tolist())
        per_class = [roc_auc_score(labels == c, scores[:, c]) for c in classes]
        return float(np.average(per_class, weights=support))

    def predictions_frame(self, windows: EmotionWindows, scores: np.ndarray) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "patient_id": windows.patient_ids,
                "sample_id": windows.sample_ids,
                "day_index": windows.days,
            }
        )
        for c in range(scores.shape[1] if scores.ndim == 2 else 0):
            frame[f"score_{c}"] = scores[:, c]
        frame["label"] = windows.labels
        return frame

    def save_model(self, path: Path, result: EmotionTrainingResult, spec: ClassifierSpec) -> None:
        save_checkpoint(
            path,
            {"state_dict": result.model.state_dict()},
            spec=spec.model_dump(mode="json"),
            embedding_dim=result.model.embedding_dim,
            history=[record.model_dump(mode="json") for record in result.history],
            best_epoch=result.best_epoch,
        )

    def load_model(self, path: Path) -> Tuple[EmotionCNN, Dict]:
        container = load_checkpoint(path)
        metadata = container["metadata"]
        model = EmotionCNN(ClassifierSpec.model_validate(metadata["spec"]), metadata["embedding_dim"])
        model.load_state_dict(container["state_dict"])
        model.eval()
        return model, metadata


# Global emotion service instance
emotion_service = EmotionService()
