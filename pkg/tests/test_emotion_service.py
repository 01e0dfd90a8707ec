import numpy as np
import pytest
import torch

from app.core.errors import InsufficientClassesError, ShapeMismatchError
from app.models.schemas import ClassifierSpec, EmbeddingSource, LayerKind
from app.services.emotion_service import EmotionCNN, EmotionWindows, classifier_specs, emotion_service
from app.services.vq_service import EncodedSample


def _encoded(codes, codebook_size=6, seed=0):
    rng = np.random.default_rng(seed)
    probabilities = rng.dirichlet(np.ones(codebook_size), size=len(codes))
    return EncodedSample(sample_id="P0", z_e=np.zeros((len(codes), 4)), codes=np.asarray(codes), probabilities=probabilities)


def _toy_windows(n=50, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n)
    labels[:3] = [0, 1, 2]
    return EmotionWindows(
        inputs=rng.normal(size=(n, 7, dim)),
        labels=labels,
        sample_ids=[f"P{i % 5}" for i in range(n)],
        patient_ids=[f"P{i % 5}" for i in range(n)],
        days=list(range(n)),
    )


def test_classifier_defaults():
    """Test batch 64, 100 epochs, patience 10, 30% validation, lr and weight decay 1e-3"""
    spec = ClassifierSpec()
    assert (spec.batch_size, spec.max_epochs, spec.patience) == (64, 100, 10)
    assert spec.validation_fraction == 0.3
    assert spec.lr == 1e-3 and spec.weight_decay == 1e-3
    assert spec.conv_channels == [32, 64] and spec.hidden_units == 128 and spec.n_classes == 3


def test_layer_order():
    """Test conv, ReLU, max-pool, batchnorm, dropout per stage then linear, ReLU, dropout, linear"""
    specs = classifier_specs(ClassifierSpec(), embedding_dim=80)
    stage = [LayerKind.CONV1D, LayerKind.RELU, LayerKind.MAXPOOL1D, LayerKind.BATCHNORM1D, LayerKind.DROPOUT]
    head = [LayerKind.LINEAR, LayerKind.RELU, LayerKind.DROPOUT, LayerKind.LINEAR]
    assert [s.kind for s in specs] == stage + stage + head
    assert (specs[0].in_channels, specs[0].out_channels) == (7, 32)
    assert (specs[5].in_channels, specs[5].out_channels) == (32, 64)
    assert specs[10].in_features == 64 * 20 and specs[10].out_features == 128
    assert specs[-1].out_features == 3
    assert specs[4].p == 0.25 and specs[12].p == 0.10


def test_output_is_three_way_distribution():
    """Test the classifier output shape and softmax normalisation"""
    model = EmotionCNN(ClassifierSpec(), embedding_dim=80)
    probabilities = emotion_service.predict(model, np.random.default_rng(0).normal(size=(5, 7, 80)))
    assert probabilities.shape == (5, 3)
    assert np.allclose(probabilities.sum(axis=1), 1.0, atol=1e-9)


def test_too_small_embedding_rejected():
    """Test an embedding too short for two pooling stages"""
    with pytest.raises(ShapeMismatchError):
        EmotionCNN(ClassifierSpec(), embedding_dim=3)


def test_hard_embeddings_are_codebook_lookups():
    """Test window rows equal the codebook vectors of each day's code"""
    codebook = np.arange(24, dtype=float).reshape(6, 4)
    encoded = _encoded([0, 5, 2, 2, 1, 3, 4, 0, 5])
    embedding = emotion_service.day_embeddings(encoded, codebook)
    labels = np.array([-1] * 8 + [2])
    windows = emotion_service.build_windows({"P0": embedding}, {"P0": labels})
    assert len(windows) == 1
    assert np.array_equal(windows.inputs[0], codebook[[5, 2, 2, 1, 3, 4, 0]])
    assert windows.labels.tolist() == [2]


def test_soft_embeddings_mix_codebook_vectors():
    """Test the pseudo-probability mixture"""
    codebook = np.random.default_rng(1).normal(size=(6, 4))
    encoded = _encoded([1, 2, 3])
    embedding = emotion_service.day_embeddings(encoded, codebook, EmbeddingSource.SOFT)
    assert np.allclose(embedding, encoded.probabilities @ codebook)


def test_codes_outside_codebook_raise():
    """Test the dimension check between profiles and codebook"""
    with pytest.raises(ShapeMismatchError):
        emotion_service.day_embeddings(_encoded([0, 7]), np.zeros((6, 4)))
    with pytest.raises(ShapeMismatchError):
        emotion_service.day_embeddings(_encoded([0, 1], codebook_size=5), np.zeros((6, 4)), EmbeddingSource.SOFT)


def test_sparse_labels_bound_window_count():
    """Test 10 labelled days in 100 give at most 10 windows and no labels give none"""
    rng = np.random.default_rng(2)
    embedding = rng.normal(size=(100, 4))
    labels = np.full(100, -1)
    labels[rng.choice(100, size=10, replace=False)] = rng.integers(0, 3, size=10)
    windows = emotion_service.build_windows({"P3-s1": embedding}, {"P3-s1": labels}, patient_of={"P3-s1": "P3"})
    assert len(windows) <= 10
    assert set(windows.patient_ids) <= {"P3"}
    empty = emotion_service.build_windows({"P3": embedding}, {"P3": np.full(100, -1)})
    assert len(empty) == 0 and empty.inputs.shape == (0, 7, 4)


def test_single_class_training_raises():
    """Test training with one class"""
    windows = _toy_windows()
    windows.labels[:] = 1
    with pytest.raises(InsufficientClassesError):
        emotion_service.train_emotion_cnn(windows, ClassifierSpec())


def test_toy_set_is_memorised():
    """Test 100% training accuracy on 50 windows without dropout"""
    windows = _toy_windows()
    spec = ClassifierSpec(
        conv_dropout=0.0,
        linear_dropout=0.0,
        validation_fraction=0.0,
        max_epochs=300,
        patience=300,
        lr=1e-2,
        weight_decay=0.0,
    )
    result = emotion_service.train_emotion_cnn(windows, spec, seed=0)
    assert emotion_service.accuracy(result.model, windows) == 1.0


def test_validation_split_holds_out_whole_patients():
    """Test no patient contributes windows to both training and validation"""
    windows = _toy_windows(n=60)
    train, validation = emotion_service._split(windows, ClassifierSpec(), seed=4)
    train_patients = {windows.patient_ids[i] for i in train}
    validation_patients = {windows.patient_ids[i] for i in validation}
    assert train_patients and validation_patients
    assert not train_patients & validation_patients
    assert len(validation_patients) == 2
    assert sorted(np.concatenate([train, validation]).tolist()) == list(range(60))


def test_single_patient_falls_back_to_window_split():
    """Test windows of one patient are still split into training and validation"""
    windows = _toy_windows(n=40)
    windows.patient_ids = ["P0"] * 40
    train, validation = emotion_service._split(windows, ClassifierSpec(), seed=4)
    assert len(validation) == 12 and len(train) == 28


def test_early_stop_after_ten_flat_epochs():
    """Test stopping on the 10th epoch without validation improvement"""
    spec = ClassifierSpec(max_epochs=100, min_delta=1e9)
    result = emotion_service.train_emotion_cnn(_toy_windows(n=60), spec, seed=1)
    assert result.stopped_early
    assert len(result.history) == 11
    assert result.best_epoch == 0


def test_training_is_deterministic():
    """Test two runs with the same seed give identical curves"""
    spec = ClassifierSpec(max_epochs=4)
    first = emotion_service.train_emotion_cnn(_toy_windows(n=80, dim=16), spec, seed=3)
    second = emotion_service.train_emotion_cnn(_toy_windows(n=80, dim=16), spec, seed=3)
    assert [r.model_dump() for r in first.history] == [r.model_dump() for r in second.history]
    assert all(r.val_loss is not None for r in first.history)


def test_class_weighted_training_runs():
    """Test the optional class-weighted loss"""
    windows = _toy_windows(n=40)
    result = emotion_service.train_emotion_cnn(windows, ClassifierSpec(max_epochs=2, class_weights=True))
    assert len(result.history) == 2


def test_perfect_ranker_scores_one():
    """Test perfectly separating scores"""
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert emotion_service.weighted_auc(np.eye(3)[labels], labels) == 1.0


def test_balanced_weighted_auc_equals_macro():
    """Test equal supports reduce to the macro average"""
    rng = np.random.default_rng(4)
    labels = np.repeat([0, 1, 2], 40)
    scores = rng.random((120, 3))
    from sklearn.metrics import roc_auc_score

    macro = np.mean([roc_auc_score(labels == c, scores[:, c]) for c in range(3)])
    assert emotion_service.weighted_auc(scores, labels) == pytest.approx(macro)


def test_random_scores_give_half():
    """Test random scores on 10^4 samples"""
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 3, size=10_000)
    assert emotion_service.weighted_auc(rng.random((10_000, 3)), labels) == pytest.approx(0.5, abs=0.02)


def test_single_class_auc_raises():
    """Test weighted AUC with one class"""
    with pytest.raises(InsufficientClassesError):
        emotion_service.weighted_auc(np.ones((4, 3)) / 3, np.zeros(4, dtype=int))


def test_checkpoint_round_trip_and_prediction_frame(tmp_path):
    """Test saving, reloading and exporting predictions"""
    windows = _toy_windows(n=30)
    spec = ClassifierSpec(max_epochs=1)
    result = emotion_service.train_emotion_cnn(windows, spec)
    emotion_service.save_model(tmp_path / "emotion.pt", result, spec)
    model, metadata = emotion_service.load_model(tmp_path / "emotion.pt")
    assert metadata["embedding_dim"] == 8
    scores = emotion_service.predict(model, windows.inputs)
    assert np.array_equal(scores, emotion_service.predict(result.model, windows.inputs))
    frame = emotion_service.predictions_frame(windows, scores)
    assert list(frame.columns) == ["patient_id", "sample_id", "day_index", "score_0", "score_1", "score_2", "label"]
    assert torch.is_tensor(next(model.parameters()))
