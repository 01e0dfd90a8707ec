import numpy as np
import pytest

from app.core.errors import MissingArtifactError
from app.models.schemas import (
    AblateRunConfig,
    AblationCell,
    AblationGrid,
    AlarmConfig,
    ClassifierSpec,
    CohortConfig,
    CohortTruth,
    CPDModelConfig,
    CPDVariant,
    LengthDistribution,
    PartitionConfig,
    PatientTruth,
    ProfileMode,
    RegimeModel,
    Variant,
    VQTrainConfig,
)
from app.services.datagen_service import datagen_service
from app.services.experiment_service import ExperimentData, experiment_service


@pytest.fixture(scope="module")
def experiment_data():
    """Five short patients split by patient and robust-scaled on the training split"""
    config = CohortConfig(
        seed=3,
        n_patients=5,
        lengths=LengthDistribution(min_length=40, max_length=50),
        regime=RegimeModel(n_regimes=2, switch_rate=0.06, min_dwell=8, effect_size=2.0),
        missingness_scale=0.3,
        label_missing_rate=0.5,
    )
    samples, truth = datagen_service.generate_cohort(config)
    samples = [datagen_service.clip_and_flag(s) for s in samples]
    partition = datagen_service.partition_patients([s.patient_id for s in samples], PartitionConfig(), seed=3)[0]
    split = {name: [s for s in samples if s.patient_id in getattr(partition, name)] for name in ("train", "validation", "test")}
    scaler = datagen_service.fit_scaler(split["train"])
    scaled = {name: [datagen_service.apply_scaler(s, scaler) for s in group] for name, group in split.items()}
    return ExperimentData(
        train=scaled["train"],
        validation=scaled["validation"],
        test=scaled["test"],
        truth=truth,
        scaler=scaler,
        binary=[False] * len(scaler.variables),
        cohort_hash="cohort",
    )


def _ablate_config(**overrides):
    values = dict(
        grid=AblationGrid(codebook_sizes=[16], n_profiles=[3, 5], lambdas=[10.0, 1e3]),
        seeds=[0],
        training=VQTrainConfig(epochs=1, batch_size=4, crop_length=16),
        classifier=ClassifierSpec(max_epochs=2),
        emotion=False,
        max_workers=2,
    )
    values.update(overrides)
    return AblateRunConfig(**values)


def test_events_map_original_days_to_positions(make_sample):
    """Test event days are located through the sample's day index"""
    sample = make_sample(np.zeros((1, 10)), day_index=np.arange(10, 20))
    truth = CohortTruth(patients={"P0": PatientTruth(patient_id="P0", regimes=[0] * 40, events=[12, 30])})
    assert experiment_service.events_for_sample(sample, truth) == [2]
    assert experiment_service.events_for_sample(make_sample(np.zeros((1, 3)), patient_id="P9"), truth) == []


def test_labels_follow_the_day_index(make_sample):
    """Test emotion labels are read at each position's original day"""
    sample = make_sample(np.zeros((1, 3)), day_index=np.array([2, 3, 4]))
    emotions = [-1, 0, 2, -1, 1]
    truth = CohortTruth(patients={"P0": PatientTruth(patient_id="P0", regimes=[0] * 5, emotions=emotions)})
    assert experiment_service.labels_for_sample(sample, truth).tolist() == [2, -1, 1]


def test_ablation_emits_every_cell_once(experiment_data, tmp_path):
    """Test one cell per grid point with the lambda-averaged event AUC"""
    config = _ablate_config(grid=AblationGrid(embedding_dims=[80, 96], codebook_sizes=[16], n_profiles=[3, 5], lambdas=[10.0, 1e3]))
    cells = experiment_service.run_ablation(config, experiment_data, tmp_path)
    assert len(cells) == 4
    assert len({cell.key for cell in cells}) == 4
    assert sorted(p.name for p in tmp_path.glob("*.pt")) == ["implicit-d80-w16-seed0.pt", "implicit-d96-w16-seed0.pt"]
    for cell in cells:
        assert set(cell.event_auc_per_lambda) == {"10", "1000"}
        assert cell.event_auc == pytest.approx(np.mean(list(cell.event_auc_per_lambda.values())))
        assert 0.0 <= cell.event_auc <= 1.0
        assert cell.cohort_hash == "cohort"
        assert cell.emotion_weighted_auc is None


def test_repeated_cell_is_identical(experiment_data, tmp_path):
    """Test the same configuration and seed reproduce the same metrics"""
    config = _ablate_config()
    first = experiment_service.run_ablation(config, experiment_data, tmp_path / "a")
    second = experiment_service.run_ablation(config, experiment_data, tmp_path / "b")
    assert [c.model_dump() for c in first] == [c.model_dump() for c in second]


def test_existing_checkpoints_are_reused(experiment_data, tmp_path):
    """Test a second run loads the saved checkpoint and matches the first"""
    config = _ablate_config()
    first = experiment_service.run_ablation(config, experiment_data, tmp_path)
    reused = experiment_service.run_ablation(config.model_copy(update={"train_missing": False}), experiment_data, tmp_path)
    assert [c.event_auc for c in first] == [c.event_auc for c in reused]


def test_missing_checkpoint_without_training_raises(experiment_data, tmp_path):
    """Test a disabled training fallback"""
    with pytest.raises(MissingArtifactError):
        experiment_service.run_ablation(_ablate_config(train_missing=False), experiment_data, tmp_path)


def test_emotion_cells_report_a_score_or_nothing(experiment_data, tmp_path):
    """Test the emotion arm yields a weighted AUC in [0, 1] or None when classes are missing"""
    cells = experiment_service.run_ablation(_ablate_config(emotion=True), experiment_data, tmp_path)
    for cell in cells:
        assert cell.emotion_weighted_auc is None or 0.0 <= cell.emotion_weighted_auc <= 1.0
    assert len({cell.emotion_weighted_auc for cell in cells}) == 1


def test_emotion_windows_keep_patient_ids(experiment_data):
    """Test windows carry the patient of their sample and original target days"""
    config = VQTrainConfig(epochs=1, batch_size=4, crop_length=16, codebook_size=16)
    from app.services.vq_service import vq_service

    model = vq_service.build_model(config, len(experiment_data.scaler.variables))
    windows = experiment_service.emotion_windows(model, experiment_data.train, experiment_data.truth)
    train_patients = {s.patient_id for s in experiment_data.train}
    assert set(windows.patient_ids) <= train_patients
    assert windows.inputs.shape[1:] == (7, 80)
    for patient, day, label in zip(windows.patient_ids, windows.days, windows.labels):
        assert experiment_data.truth.patients[patient].emotions[day] == label


def test_hard_emotion_embeddings_look_up_raw_codewords(experiment_data):
    """Test hard day embeddings are the codebook rows of the raw codes, not of the profile ids"""
    config = VQTrainConfig(epochs=1, batch_size=4, crop_length=16, codebook_size=16)
    from app.services.vq_service import vq_service

    model = vq_service.build_model(config, len(experiment_data.scaler.variables))
    windows = experiment_service.emotion_windows(model, experiment_data.train, experiment_data.truth)
    assert len(windows) > 0
    codebook = model.codebook.embeddings.detach().double().numpy()
    samples = {s.sample_id: s for s in experiment_data.train}
    encoded = {sample_id: vq_service.encode_sample(model, s) for sample_id, s in samples.items()}
    for inputs, sample_id, day in zip(windows.inputs, windows.sample_ids, windows.days):
        target = int(np.flatnonzero(samples[sample_id].day_index == day)[0])
        codes = encoded[sample_id].codes[target - 7 : target]
        np.testing.assert_allclose(inputs, codebook[codes])


def test_ablation_tables_pivot_dimension_by_dictionary_size():
    """Test the trade-off table layout averaged over seeds"""
    cells = [
        AblationCell(
            variant=Variant.IMPLICIT,
            embedding_dim=d,
            codebook_size=w,
            n_profiles=20,
            samples=5,
            window=7,
            lambdas=[10.0],
            cpd_variant=CPDVariant.HIERARCHICAL,
            profile_mode=ProfileMode.DISCRETE,
            seed=seed,
            event_auc=0.5 + 0.1 * seed + d / 1000,
            event_auc_per_lambda={"10": 0.5},
        )
        for d in (80, 320)
        for w in (256, 512, 1024)
        for seed in (0, 1)
    ]
    tables = experiment_service.ablation_tables(cells)
    assert set(tables) == {"event_auc"}
    table = tables["event_auc"]
    assert list(table.columns) == [256, 512, 1024]
    assert table.shape == (2, 3)
    assert table.loc[("implicit", 20, 80), 256] == pytest.approx(0.63)
    frame = experiment_service.cells_frame(cells)
    assert len(frame) == 12 and "event_auc_lambda_10" in frame.columns


def test_week_lagged_events_are_caught_from_regime_profiles():
    """Test profile switches that take a few days to confirm still land in the week before each event"""
    from app.services.vq_service import vq_service

    config = CohortConfig(regime=RegimeModel(n_regimes=2, switch_rate=0.03, min_dwell=30))
    rng = np.random.default_rng(5)
    profiles, events = [], []
    for p in range(8):
        regimes = datagen_service.sample_regimes(200, config, rng)
        codes = np.where(regimes == 0, rng.integers(0, 4, 200), rng.integers(4, 8, 200))
        noise = rng.random(200) < 0.05
        codes[noise] = rng.integers(0, 10, int(noise.sum()))
        profiles.append(vq_service.profile_sequence(codes, n_profiles=10, sample_id=f"P{p}"))
        change_points = np.flatnonzero(np.diff(regimes)) + 1
        events.append([int(t) + config.event_lag for t in change_points if t + config.event_lag < 200])
    assert config.event_lag == 7
    assert sum(len(e) for e in events) >= 8

    curves, _ = experiment_service.event_curves(
        profiles, events, CPDModelConfig(variant=CPDVariant.HIERARCHICAL, alpha=0.5), [1e3], AlarmConfig(window=7)
    )
    assert curves[1e3].auc >= 0.9


@pytest.mark.slow
def test_regime_changes_are_detected_on_a_separable_cohort():
    """Test profile change points anticipate events on a cohort with strong regime effects"""
    from app.services.vq_service import vq_service

    config = CohortConfig(
        seed=17,
        n_patients=20,
        lengths=LengthDistribution(min_length=200, max_length=200),
        regime=RegimeModel(n_regimes=2, switch_rate=0.03, min_dwell=30, effect_size=3.0),
        missingness_scale=0.3,
    )
    samples, truth = datagen_service.generate_cohort(config)
    samples = [datagen_service.clip_and_flag(s) for s in samples]
    scaler = datagen_service.fit_scaler(samples[:16])
    scaled = [datagen_service.apply_scaler(s, scaler) for s in samples]

    training = VQTrainConfig(variant=Variant.IMPLICIT, codebook_size=20, epochs=150, batch_size=8, crop_length=64)
    model = vq_service.train(scaled[:16], training, vq_service.binary_flags(scaler.variables)).model
    # detection is unsupervised, so every patient is scored
    _, profiles = experiment_service.profile_samples(model, scaled, n_profiles=20)
    events = [experiment_service.events_for_sample(s, truth) for s in scaled]
    assert sum(len(e) for e in events) >= 20

    curves, _ = experiment_service.event_curves(
        profiles, events, CPDModelConfig(variant=CPDVariant.HIERARCHICAL, alpha=0.25), [1e3], AlarmConfig(window=7)
    )
    assert curves[1e3].auc >= 0.90
