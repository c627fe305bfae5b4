"""Graph pooling library: SpaPool, sparse and dense baselines, and an experiment harness."""

__version__ = "0.1.0"
