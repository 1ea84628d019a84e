"""Heterogeneous displacement-effect engine.

Pipeline: synthetic data generation (or panel ingestion) -> propensity
matching -> establishment-clustered cross-fitted causal forests ->
group/calibration/Qini evaluation -> policy-tree targeting -> partial
market-effect decomposition.
"""

__version__ = "0.1.0"

ARTIFACT_VERSION = 1
