import numpy as np
import pytest
import torch

from app.core.errors import DataValidationError, TrainingDivergedError
from app.models.schemas import (
    CohortConfig,
    LengthDistribution,
    OptimizerConfig,
    ProfileMode,
    RegimeModel,
    ValueType,
    Variant,
    VQTrainConfig,
)
from app.services.datagen_service import datagen_service
from app.services.vq_service import vq_service


def _scaled_cohort(config):
    samples, truth = datagen_service.generate_cohort(config)
    samples = [datagen_service.clip_and_flag(s) for s in samples]
    scaler = datagen_service.fit_scaler(samples)
    return [datagen_service.apply_scaler(s, scaler) for s in samples], scaler, truth


def _quick_config(**overrides):
    values = dict(embedding_dim=80, codebook_size=32, epochs=2, batch_size=3, crop_length=16, seed=5)
    values.update(overrides)
    return VQTrainConfig(**values)


def test_training_defaults():
    """Test beta, restart threshold, clip norm, lr and plateau defaults"""
    config = VQTrainConfig()
    assert config.beta == 0.25
    assert config.restart_threshold == 0.1
    assert config.optimizer.clip_norm == 2.0
    assert config.optimizer.lr == 1e-3
    assert (config.optimizer.plateau_factor, config.optimizer.plateau_patience) == (0.1, 10)
    assert (config.embedding_dim, config.codebook_size, config.ema_decay) == (80, 256, 0.99)


def test_commitment_is_zero_when_encoder_output_is_a_codeword():
    """Test z_e = e_k gives a zero commitment term"""
    z_e = torch.randn(2, 4, 3)
    total, commitment = vq_service.vq_loss_terms(z_e, z_e.clone(), torch.tensor(1.5), beta=0.25)
    assert commitment.item() == 0.0
    assert total.item() == 1.5


def test_zero_beta_returns_reconstruction_loss():
    """Test beta = 0"""
    total, _ = vq_service.vq_loss_terms(torch.randn(1, 4, 3), torch.randn(1, 4, 3), torch.tensor(0.7), beta=0.0)
    assert total.item() == pytest.approx(0.7)


def test_commitment_contribution_is_linear_in_beta():
    """Test that doubling beta doubles the commitment contribution"""
    z_e, codewords, reconstruction = torch.randn(1, 4, 3), torch.randn(1, 4, 3), torch.tensor(0.0)
    single, _ = vq_service.vq_loss_terms(z_e, codewords, reconstruction, beta=0.25)
    double, _ = vq_service.vq_loss_terms(z_e, codewords, reconstruction, beta=0.5)
    assert double.item() == pytest.approx(2 * single.item())


def test_commitment_gradient_reaches_only_encoder_output():
    """Test the stop-gradient on the codeword side"""
    z_e = torch.randn(1, 4, 3, requires_grad=True)
    codewords = torch.randn(1, 4, 3, requires_grad=True)
    total, _ = vq_service.vq_loss_terms(z_e, codewords, torch.tensor(0.0), beta=1.0)
    total.backward()
    assert z_e.grad is not None and codewords.grad is None


def test_profile_sequence_with_few_codes():
    """Test a sample using 3 codes with m = 5"""
    profile = vq_service.profile_sequence(np.array([7, 7, 2, 9, 2, 7]), n_profiles=5)
    assert profile.n_profiles == 3
    assert profile.code_ranking == [7, 2, 9]
    assert profile.profile_ids == [0, 0, 1, 2, 1, 0]
    assert profile.dummy_id not in profile.profile_ids


def test_rare_code_maps_to_dummy():
    """Test that a code used once in 180 days falls into the dummy class"""
    rng = np.random.default_rng(0)
    codes = rng.choice([1, 2, 3, 4, 5], size=179).tolist() + [42]
    profile = vq_service.profile_sequence(np.array(codes), n_profiles=5)
    assert profile.profile_ids[-1] == profile.dummy_id == 5
    assert profile.alphabet_size == 6


def test_profile_ranking_breaks_ties_by_code_index():
    """Test equal counts ranked by lower code index"""
    profile = vq_service.profile_sequence(np.array([5, 3, 5, 3, 8]), n_profiles=1)
    assert profile.code_ranking == [3]
    assert profile.profile_ids == [1, 0, 1, 0, 1]


def test_probabilistic_profiles_fold_rest_into_dummy():
    """Test that compressed pseudo-probability vectors sum to 1"""
    rng = np.random.default_rng(1)
    probabilities = rng.dirichlet(np.ones(12), size=30)
    codes = probabilities.argmax(axis=1)
    profile = vq_service.profile_sequence(codes, 4, ProfileMode.PROBABILISTIC, probabilities)
    vectors = np.asarray(profile.probabilities)
    assert vectors.shape == (30, profile.n_profiles + 1)
    assert np.allclose(vectors.sum(axis=1), 1.0, atol=1e-9)
    top = profile.code_ranking
    assert np.allclose(vectors[:, : len(top)], probabilities[:, top])


def test_probabilistic_profiles_need_probabilities():
    """Test the missing pseudo-probability input"""
    with pytest.raises(DataValidationError):
        vq_service.profile_sequence(np.array([1, 2]), 2, ProfileMode.PROBABILISTIC)


def test_perfect_reconstruction_metrics():
    """Test MAE 0 and F1 1 for a perfect reconstruction, absent subsets as None"""
    values = np.array([1.0, 4.0, 9.0])
    real = vq_service.variable_metrics("x", ValueType.REAL, {"xo": (values, values), "mcar": (np.empty(0), np.empty(0))}, median=4.0)
    assert real.xo_mae == 0.0
    assert real.mcar_mae is None
    assert real.baseline_xo_mae == pytest.approx(8.0 / 3.0)

    flags = np.array([0.0, 1.0, 1.0])
    binary = vq_service.variable_metrics("b", ValueType.BINARY, {"xo": (flags, flags)}, median=0.0)
    assert binary.f1 == 1.0
    assert binary.xo_mae is None and binary.mcar_mae is None


@pytest.fixture
def tiny_cohort():
    """Four short patients with light missingness"""
    config = CohortConfig(
        seed=11,
        n_patients=4,
        lengths=LengthDistribution(min_length=40, max_length=48),
        regime=RegimeModel(n_regimes=2, switch_rate=0.05, min_dwell=10, effect_size=2.0),
        missingness_scale=0.3,
    )
    return _scaled_cohort(config)


def test_training_is_deterministic(tiny_cohort):
    """Test two short runs with the same seed produce identical curves"""
    samples, _, _ = tiny_cohort
    binary = vq_service.binary_flags(samples[0].variables)
    config = _quick_config()
    first = vq_service.train(samples, config, binary, validation_samples=samples[:1])
    second = vq_service.train(samples, config, binary, validation_samples=samples[:1])
    assert len(first.history) == 2
    assert [r.train_loss for r in first.history] == [r.train_loss for r in second.history]
    assert all(np.isfinite(r.val_loss) for r in first.history)
    assert all(1.0 <= r.perplexity <= 32 for r in first.history)


def test_training_rejects_unscaled_samples(cohort_config):
    """Test the scaled-space precondition"""
    samples, _ = datagen_service.generate_cohort(cohort_config)
    with pytest.raises(DataValidationError):
        vq_service.train(samples, _quick_config(), [False] * 10)


def test_training_aborts_on_non_finite_loss(tiny_cohort):
    """Test the epoch / batch context on a diverging loss"""
    samples, _, _ = tiny_cohort
    broken = [s.with_arrays(values=np.where(s.mask == 1, np.inf, s.values)) for s in samples]
    binary = vq_service.binary_flags(samples[0].variables)
    with pytest.raises(TrainingDivergedError) as excinfo:
        vq_service.train(broken, _quick_config(), binary)
    assert excinfo.value.details["epoch"] == 0
    assert excinfo.value.details["batch"] == 0


def test_checkpoint_round_trip_reproduces_reconstructions(tiny_cohort, tmp_path):
    """Test that a reloaded model reconstructs identically"""
    samples, scaler, _ = tiny_cohort
    binary = vq_service.binary_flags(samples[0].variables)
    config = _quick_config(epochs=1)
    result = vq_service.train(samples, config, binary)
    vq_service.save_model(tmp_path / "vq.pt", result, config, samples[0].variables, binary, scaler)
    model, metadata = vq_service.load_model(tmp_path / "vq.pt")
    assert metadata["variables"] == samples[0].variables
    assert np.array_equal(vq_service.reconstruct(model, samples[0]), vq_service.reconstruct(result.model, samples[0]))


def test_encoded_sample_and_usage_tables(tiny_cohort):
    """Test per-day codes, pseudo-probabilities and codebook usage export"""
    samples, _, _ = tiny_cohort
    binary = vq_service.binary_flags(samples[0].variables)
    result = vq_service.train(samples, _quick_config(epochs=1), binary)
    encoded = [vq_service.encode_sample(result.model, s) for s in samples]
    assert encoded[0].codes.shape == (samples[0].n_days,)
    assert np.allclose(encoded[0].probabilities.sum(axis=1), 1.0, atol=1e-9)
    assert np.array_equal(encoded[0].probabilities.argmax(axis=1), encoded[0].codes)
    per_sample, usage = vq_service.codebook_usage(encoded, 32)
    assert len(per_sample) == len(samples)
    assert usage["count"].sum() == sum(s.n_days for s in samples)


def test_reconstruction_report_layout(tiny_cohort):
    """Test that binary variables only report F1 and others report MAE with a baseline"""
    samples, scaler, _ = tiny_cohort
    binary = vq_service.binary_flags(samples[0].variables)
    result = vq_service.train(samples, _quick_config(epochs=1), binary)
    mcar = [datagen_service.corrupt_mcar(s, seed=1) for s in samples]
    report = vq_service.reconstruction_metrics(result.model, scaler, samples, mcar=mcar)
    rows = {row.variable: row for row in report.variables}
    assert rows["Weekend"].f1 is not None and rows["Weekend"].mcar_mae is None
    assert rows["Practiced Sport"].xo_mae is None
    assert rows["Total Steps"].xo_mae is not None and rows["Total Steps"].baseline_xo_mae is not None
    assert rows["Total Steps"].mnar_mae is None


@pytest.mark.slow
def test_tiny_cohort_training_halves_loss():
    """Test 200 epochs on 4 patients x 64 days cut the loss by at least half"""
    config = CohortConfig(
        seed=2,
        n_patients=4,
        lengths=LengthDistribution(min_length=64, max_length=64),
        missingness_scale=0.5,
    )
    samples, _, _ = _scaled_cohort(config)
    binary = vq_service.binary_flags(samples[0].variables)
    train_config = VQTrainConfig(
        codebook_size=64, epochs=200, batch_size=4, crop_length=64, seed=0, optimizer=OptimizerConfig()
    )
    result = vq_service.train(samples, train_config, binary)
    assert result.history[-1].train_loss <= 0.5 * result.history[0].train_loss


@pytest.mark.slow
def test_implicit_variant_beats_median_on_mcar_entries():
    """Test imputation against the per-variable median baseline on MCAR entries"""
    config = CohortConfig(
        seed=21,
        n_patients=20,
        lengths=LengthDistribution(min_length=200, max_length=200),
        regime=RegimeModel(n_regimes=2, switch_rate=0.03, min_dwell=14, effect_size=2.0),
        missingness_scale=0.5,
    )
    samples, truth = datagen_service.generate_cohort(config)
    samples = [datagen_service.clip_and_flag(s) for s in samples]
    train, test = samples[:16], samples[16:]
    scaler = datagen_service.fit_scaler(train)
    train = [datagen_service.apply_scaler(s, scaler) for s in train]
    test = [datagen_service.apply_scaler(s, scaler) for s in test]
    mcar = [datagen_service.corrupt_mcar(s, seed=3) for s in test]
    binary = vq_service.binary_flags(train[0].variables)
    train_config = VQTrainConfig(variant=Variant.IMPLICIT, epochs=150, batch_size=8, crop_length=64, seed=0)
    result = vq_service.train(train, train_config, binary)
    report = vq_service.reconstruction_metrics(result.model, scaler, test, mcar=mcar)
    rows = [row for row in report.variables if row.value_type != ValueType.BINARY and row.mcar_mae is not None]
    wins = sum(row.mcar_mae < row.baseline_mcar_mae for row in rows)
    assert wins >= len(rows) - 1
