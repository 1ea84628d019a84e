import numpy as np
import pytest

from displace import dgp
from displace.matching import match_dataset


@pytest.fixture(scope="session")
def small_world():
    """A compact generated market with matched controls, shared across
    modules to keep the suite fast."""
    cfg = dgp.default_config(seed=2024)
    cfg.n_markets = 12
    cfg.establishments_per_market = (10, 14)
    cfg.workers_per_establishment = (6, 10)
    ds, oracle = dgp.generate_panel(cfg)
    matched, balance, _ = match_dataset(ds, list(dgp.COVARIATES), k=3)
    return cfg, ds, oracle, matched


@pytest.fixture(scope="session")
def medium_world():
    """Larger generated market for recovery-quality checks."""
    cfg = dgp.default_config(seed=77)
    cfg.n_markets = 30
    cfg.establishments_per_market = (20, 28)
    cfg.workers_per_establishment = (8, 12)
    ds, oracle = dgp.generate_panel(cfg)
    matched, _, _ = match_dataset(ds, list(dgp.COVARIATES), k=3)
    return cfg, ds, oracle, matched
