from datetime import date

import numpy as np
import pytest
import torch

from app.core.config import settings
from app.models.schemas import CohortConfig, LengthDistribution, RegimeModel, TimeSeriesSample


def build_sample(values, mask=None, variables=None, patient_id="P0", start=date(2019, 3, 15), day_index=None):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if mask is None:
        mask = np.where(np.isnan(values), 0, 1)
    mask = np.atleast_2d(np.asarray(mask)).astype(np.int8)
    variables = variables or [f"v{i}" for i in range(values.shape[0])]
    day_index = np.arange(values.shape[1]) if day_index is None else np.asarray(day_index)
    return TimeSeriesSample(
        patient_id=patient_id,
        start_date=start,
        day_index=day_index,
        variables=list(variables),
        values=values,
        mask=mask,
    )


@pytest.fixture
def make_sample():
    """Factory for hand-built samples"""
    return build_sample


@pytest.fixture(autouse=True)
def _seed_torch():
    """Seed torch's global generator before every test"""
    torch.manual_seed(0)
    yield


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    """Point the configured output root at a temporary directory"""
    monkeypatch.setattr(settings, "output_root", str(tmp_path))
    return tmp_path


@pytest.fixture
def cohort_config():
    """Small two-regime cohort with strong regime effects and light missingness"""
    return CohortConfig(
        seed=7,
        n_patients=6,
        lengths=LengthDistribution(min_length=70, max_length=90),
        regime=RegimeModel(n_regimes=2, switch_rate=0.05, min_dwell=14, effect_size=2.0),
        missingness_scale=0.3,
        label_missing_rate=0.5,
    )
