"""Query-driven cardinality estimators trained for robustness to workload shift."""

__version__ = "0.1.0"
