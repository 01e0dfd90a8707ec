import numpy as np
import pytest
from scipy import integrate, stats

from app.core.errors import DataValidationError, ShapeMismatchError
from app.models.schemas import CPDModelConfig, CPDVariant
from app.services.cpd_models import (
    DirichletCategorical,
    DirichletMultinomial,
    NormalInverseWishart,
    build_observation_model,
)


def _feed(model, observations):
    for x in observations:
        model.advance(x)
    return model


def test_fresh_categorical_predictive_is_uniform():
    """Test K=20, alpha=1 gives 1/20 for every id"""
    model = DirichletCategorical(20, alpha=1.0)
    for z in (0, 7, 19):
        assert np.exp(model.log_predictive(z)[0]) == pytest.approx(1 / 20)


def test_categorical_predictive_after_counts():
    """Test counts [2, 0] with alpha 1 give 3/4"""
    model = _feed(DirichletCategorical(2), [0, 0])
    assert np.exp(model.log_predictive(0)[-1]) == pytest.approx(0.75)
    assert np.exp(model.log_predictive(1)[-1]) == pytest.approx(0.25)


def test_categorical_counts_are_order_invariant():
    """Test exchangeability of the oldest hypothesis"""
    first = _feed(DirichletCategorical(3), [0, 1, 1, 2])
    second = _feed(DirichletCategorical(3), [1, 2, 0, 1])
    assert np.array_equal(first.stats["counts"][-1], second.stats["counts"][-1])


def test_profile_id_outside_alphabet_raises():
    """Test out-of-alphabet observations"""
    with pytest.raises(DataValidationError):
        DirichletCategorical(4).log_predictive(4)


def test_advance_prepends_fresh_hypothesis():
    """Test statistic layout after two observations and a pruning selection"""
    model = _feed(DirichletCategorical(2), [1, 1])
    assert model.n_hypotheses == 3
    assert model.stats["totals"].tolist() == [0.0, 1.0, 2.0]
    model.advance(0, keep=np.array([0, 3]))
    assert model.stats["totals"].tolist() == [0.0, 3.0]


def test_single_draw_multinomial_is_bitwise_categorical():
    """Test S=1 reduces exactly to the categorical predictive"""
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 5, size=12)
    categorical = DirichletCategorical(5, alpha=0.5)
    multinomial = DirichletMultinomial(5, alpha=0.5, samples=1)
    for z in ids:
        one_hot = np.eye(5)[z]
        assert np.array_equal(categorical.log_predictive(z), multinomial.log_predictive(one_hot))
        categorical.advance(z)
        multinomial.advance(one_hot)


def test_multinomial_symmetric_counts_have_equal_predictive():
    """Test (5, 0) and (0, 5) on a fresh symmetric prior"""
    model = DirichletMultinomial(2, alpha=1.0, samples=5)
    assert model.log_predictive([5, 0])[0] == pytest.approx(model.log_predictive([0, 5])[0])


def test_multinomial_matches_direct_mass_function():
    """Test the predictive against the Dirichlet-multinomial pmf"""
    model = _feed(DirichletMultinomial(4, alpha=1.0, samples=5), [[2, 1, 0, 2], [0, 0, 5, 0]])
    x = np.array([1, 0, 3, 1])
    expected = stats.dirichlet_multinomial.logpmf(x, alpha=1.0 + np.array([2, 1, 5, 2]), n=5)
    assert model.log_predictive(x)[-1] == pytest.approx(expected, abs=1e-10)


def test_multinomial_rejects_wrong_total():
    """Test count vectors that do not sum to S"""
    with pytest.raises(DataValidationError):
        DirichletMultinomial(3, samples=5).log_predictive([1, 1, 1])


def test_scalar_niw_predictive_is_student_t():
    """Test dim=1 against the scalar Student-t density"""
    model = _feed(NormalInverseWishart(1, mu0=np.array([0.5])), [[1.0], [0.2], [-0.4]])
    df, loc, scale = model.predictive_params()
    expected = stats.t.logpdf(0.9, df[-1], loc=loc[-1, 0], scale=np.sqrt(scale[-1, 0, 0]))
    assert model.log_predictive([0.9])[-1] == pytest.approx(expected, abs=1e-10)


def test_niw_predictive_matches_multivariate_t():
    """Test dim=3 against scipy's multivariate t"""
    rng = np.random.default_rng(3)
    model = _feed(NormalInverseWishart(3), rng.normal(size=(6, 3)))
    df, loc, scale = model.predictive_params()
    x = rng.normal(size=3)
    values = model.log_predictive(x)
    for h in range(model.n_hypotheses):
        expected = stats.multivariate_t.logpdf(x, loc=loc[h], shape=scale[h], df=df[h])
        assert values[h] == pytest.approx(expected, abs=1e-9)


def test_scalar_predictive_integrates_to_one():
    """Test numerical quadrature of the 1-D predictive"""
    model = _feed(NormalInverseWishart(1), [[0.3], [1.1]])
    grid = np.linspace(-400.0, 400.0, 4001)
    density = np.exp([model.log_predictive([g])[-1] for g in grid])
    assert integrate.trapezoid(density, grid) == pytest.approx(1.0, abs=1e-3)


def test_niw_updates_match_batch_recomputation():
    """Test sequential sufficient statistics against the batch posterior"""
    rng = np.random.default_rng(5)
    data = rng.normal(size=(10, 2))
    mu0 = np.array([0.2, -0.1])
    model = _feed(NormalInverseWishart(2, mu0=mu0, kappa0=1.0), data)
    n, mean = len(data), data.mean(axis=0)
    scatter = (data - mean).T @ (data - mean)
    psi = np.eye(2) + scatter + (1.0 * n / (1.0 + n)) * np.outer(mean - mu0, mean - mu0)
    assert model.stats["kappa"][-1] == 11.0
    assert model.stats["nu"][-1] == 4.0 + 10.0
    assert np.allclose(model.stats["mu"][-1], (mu0 + n * mean) / (1.0 + n))
    assert np.allclose(model.stats["psi"][-1], psi)


def test_niw_dimension_mismatch_raises():
    """Test vectors of the wrong dimension"""
    with pytest.raises(ShapeMismatchError):
        NormalInverseWishart(3).log_predictive([1.0, 2.0])


@pytest.mark.parametrize(
    "model, observations",
    [
        (DirichletCategorical(3, alpha=0.7), [0, 2, 2, 1, 0]),
        (DirichletMultinomial(3, alpha=1.0, samples=4), [[4, 0, 0], [1, 2, 1], [0, 0, 4], [2, 2, 0]]),
        (NormalInverseWishart(2, mu0=np.array([0.1, 0.3])), np.random.default_rng(2).normal(size=(5, 2))),
    ],
)
def test_segment_marginal_equals_chained_predictives(model, observations):
    """Test the closed-form segment marginal against the product of sequential predictives"""
    chained = 0.0
    for x in observations:
        chained += model.log_predictive(x)[-1]
        model.advance(x)
    assert model.segment_log_marginal(observations) == pytest.approx(chained, abs=1e-9)


def test_build_model_uses_prior_window_mean():
    """Test the NIW prior mean is the average of the first W days"""
    observations = np.arange(20, dtype=float).reshape(10, 2)
    model = build_observation_model(CPDVariant.MULTIVARIATE, CPDModelConfig(prior_window=3), 2, observations)
    assert np.allclose(model.mu0, [2.0, 3.0])
    assert model.nu0 == 4.0
    assert isinstance(build_observation_model(CPDVariant.MULTINOMIAL, CPDModelConfig(), 6), DirichletMultinomial)
