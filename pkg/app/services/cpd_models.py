from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import gammaln, multigammaln

from ..core.errors import DataValidationError, ShapeMismatchError
from ..models.schemas import CPDModelConfig, CPDVariant
import logging

logger = logging.getLogger(__name__)


class ConjugateModel:
    """Observation model with one bundle of sufficient statistics per run-length hypothesis.

    Row 0 of every statistic array always belongs to the youngest hypothesis.
    `advance` folds an observation into every surviving hypothesis and prepends
    a fresh prior bundle for the new change-point hypothesis.
    """

    variant: CPDVariant

    def __init__(self):
        self.stats: Dict[str, np.ndarray] = {}
        self.reset()

    def prior(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def updated(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def validate(self, x) -> np.ndarray:
        return np.asarray(x)

    def log_predictive(self, x) -> np.ndarray:
        raise NotImplementedError

    def segment_log_marginal(self, xs: Sequence) -> float:
        """Closed-form log p(x_1..x_n) of one segment under the prior"""
        raise NotImplementedError

    def reset(self) -> None:
        self.stats = self.prior()

    @property
    def n_hypotheses(self) -> int:
        return int(next(iter(self.stats.values())).shape[0])

    def advance(self, x, keep: Optional[np.ndarray] = None) -> None:
        x = self.validate(x)
        grown = self.updated(x)
        fresh = self.prior()
        self.stats = {key: np.concatenate([fresh[key], grown[key]], axis=0) for key in self.stats}
        if keep is not None:
            self.stats = {key: value[keep] for key, value in self.stats.items()}


class DirichletCategorical(ConjugateModel):
    """Symmetric Dirichlet prior over a finite alphabet of profile ids"""

    variant = CPDVariant.HIERARCHICAL

    def __init__(self, alphabet_size: int, alpha: float = 1.0):
        if alphabet_size < 1:
            raise DataValidationError("Alphabet must contain at least one symbol", alphabet_size=alphabet_size)
        self.alphabet_size = alphabet_size
        self.alpha = float(alpha)
        super().__init__()

    def prior(self) -> Dict[str, np.ndarray]:
        return {"counts": np.zeros((1, self.alphabet_size)), "totals": np.zeros(1)}

    def validate(self, x) -> np.ndarray:
        z = int(x)
        if not 0 <= z < self.alphabet_size:
            raise DataValidationError(
                f"Profile id {z} outside alphabet of size {self.alphabet_size}", profile_id=z
            )
        return np.asarray(z)

    def updated(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        counts = self.stats["counts"].copy()
        counts[:, int(x)] += 1.0
        return {"counts": counts, "totals": self.stats["totals"] + 1.0}

    def categorical_log_predictive(self, z: int) -> np.ndarray:
        return np.log(self.alpha + self.stats["counts"][:, z]) - np.log(
            self.alphabet_size * self.alpha + self.stats["totals"]
        )

    def log_predictive(self, x) -> np.ndarray:
        return self.categorical_log_predictive(int(self.validate(x)))

    def _pooled_log_marginal(self, pooled: np.ndarray) -> float:
        k_alpha = self.alphabet_size * self.alpha
        return float(
            gammaln(k_alpha)
            - gammaln(k_alpha + pooled.sum())
            + np.sum(gammaln(self.alpha + pooled) - gammaln(self.alpha))
        )

    def segment_log_marginal(self, xs: Sequence) -> float:
        ids = np.array([int(self.validate(x)) for x in xs], dtype=np.int64)
        return self._pooled_log_marginal(np.bincount(ids, minlength=self.alphabet_size).astype(float))


class DirichletMultinomial(DirichletCategorical):
    """Dirichlet prior with a count vector of S profile draws per day"""

    variant = CPDVariant.MULTINOMIAL

    def __init__(self, alphabet_size: int, alpha: float = 1.0, samples: int = 5):
        self.samples = int(samples)
        super().__init__(alphabet_size, alpha)

    def validate(self, x) -> np.ndarray:
        counts = np.asarray(x, dtype=float)
        if counts.shape != (self.alphabet_size,):
            raise ShapeMismatchError("dirichlet_multinomial", [self.alphabet_size], list(counts.shape))
        if np.any(counts < 0) or np.any(counts != np.round(counts)) or int(counts.sum()) != self.samples:
            raise DataValidationError(
                f"Count vector must hold {self.samples} non-negative integer draws",
                total=float(counts.sum()),
                samples=self.samples,
            )
        return counts

    def updated(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        return {"counts": self.stats["counts"] + x, "totals": self.stats["totals"] + self.samples}

    def log_coefficient(self, counts: np.ndarray) -> float:
        return float(gammaln(self.samples + 1) - gammaln(counts + 1).sum())

    def log_predictive(self, x) -> np.ndarray:
        counts = self.validate(x)
        if self.samples == 1:
            return self.categorical_log_predictive(int(np.argmax(counts)))
        a = self.alpha + self.stats["counts"]
        total = self.alphabet_size * self.alpha + self.stats["totals"]
        return (
            self.log_coefficient(counts)
            + gammaln(total)
            - gammaln(total + self.samples)
            + np.sum(gammaln(a + counts) - gammaln(a), axis=1)
        )

    def segment_log_marginal(self, xs: Sequence) -> float:
        rows = [self.validate(x) for x in xs]
        pooled = np.sum(rows, axis=0)
        return self._pooled_log_marginal(pooled) + sum(self.log_coefficient(row) for row in rows)


class NormalInverseWishart(ConjugateModel):
    """Normal-Inverse-Wishart prior over real vectors; the predictive is a multivariate Student-t"""

    variant = CPDVariant.MULTIVARIATE

    def __init__(
        self,
        dim: int,
        mu0: Optional[np.ndarray] = None,
        kappa0: float = 1.0,
        nu0: Optional[float] = None,
        psi0: Optional[np.ndarray] = None,
    ):
        self.dim = dim
        self.mu0 = np.zeros(dim) if mu0 is None else np.asarray(mu0, dtype=float)
        self.kappa0 = float(kappa0)
        self.nu0 = float(dim + 2 if nu0 is None else nu0)
        self.psi0 = np.eye(dim) if psi0 is None else np.asarray(psi0, dtype=float)
        if self.mu0.shape != (dim,) or self.psi0.shape != (dim, dim):
            raise ShapeMismatchError("normal_inverse_wishart", [dim], list(self.mu0.shape))
        if self.nu0 <= dim - 1:
            raise DataValidationError("Degrees of freedom must exceed dim - 1", nu0=self.nu0, dim=dim)
        super().__init__()

    def prior(self) -> Dict[str, np.ndarray]:
        return {
            "kappa": np.array([self.kappa0]),
            "nu": np.array([self.nu0]),
            "mu": self.mu0[None].copy(),
            "psi": self.psi0[None].copy(),
        }

    def validate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ShapeMismatchError("normal_inverse_wishart", [self.dim], list(x.shape))
        return x

    def updated(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        kappa, nu, mu, psi = (self.stats[k] for k in ("kappa", "nu", "mu", "psi"))
        delta = x[None] - mu
        return {
            "kappa": kappa + 1.0,
            "nu": nu + 1.0,
            "mu": (kappa[:, None] * mu + x[None]) / (kappa[:, None] + 1.0),
            "psi": psi + (kappa / (kappa + 1.0))[:, None, None] * np.einsum("hi,hj->hij", delta, delta),
        }

    def predictive_params(self):
        """Degrees of freedom, location and scale matrix of the Student-t predictive per hypothesis"""
        kappa, nu, mu, psi = (self.stats[k] for k in ("kappa", "nu", "mu", "psi"))
        df = nu - self.dim + 1.0
        scale = psi * ((kappa + 1.0) / (kappa * df))[:, None, None]
        return df, mu, scale

    def log_predictive(self, x) -> np.ndarray:
        x = self.validate(x)
        df, loc, scale = self.predictive_params()
        delta = x[None] - loc
        _, logdet = np.linalg.slogdet(scale)
        maha = np.einsum("hi,hi->h", delta, np.linalg.solve(scale, delta[..., None])[..., 0])
        d = self.dim
        return (
            gammaln((df + d) / 2.0)
            - gammaln(df / 2.0)
            - 0.5 * d * np.log(df * np.pi)
            - 0.5 * logdet
            - 0.5 * (df + d) * np.log1p(maha / df)
        )

    def segment_log_marginal(self, xs: Sequence) -> float:
        data = np.stack([self.validate(x) for x in xs])
        n, d = data.shape
        mean = data.mean(axis=0)
        centred = data - mean
        kappa_n = self.kappa0 + n
        nu_n = self.nu0 + n
        diff = mean - self.mu0
        psi_n = self.psi0 + centred.T @ centred + (self.kappa0 * n / kappa_n) * np.outer(diff, diff)
        _, logdet0 = np.linalg.slogdet(self.psi0)
        _, logdet_n = np.linalg.slogdet(psi_n)
        return float(
            -0.5 * n * d * np.log(np.pi)
            + multigammaln(nu_n / 2.0, d)
            - multigammaln(self.nu0 / 2.0, d)
            + 0.5 * self.nu0 * logdet0
            - 0.5 * nu_n * logdet_n
            + 0.5 * d * (np.log(self.kappa0) - np.log(kappa_n))
        )


def build_observation_model(
    variant: CPDVariant,
    config: CPDModelConfig,
    size: int,
    observations: Optional[np.ndarray] = None,
) -> ConjugateModel:
    """Model for a prepared sequence; `size` is the alphabet size or the vector dimension"""
    if variant == CPDVariant.HIERARCHICAL:
        return DirichletCategorical(size, config.alpha)
    if variant == CPDVariant.MULTINOMIAL:
        return DirichletMultinomial(size, config.alpha, config.samples)
    mu0 = None
    if observations is not None and len(observations):
        mu0 = np.asarray(observations[: config.prior_window], dtype=float).mean(axis=0)
    return NormalInverseWishart(size, mu0=mu0, kappa0=config.kappa0)
