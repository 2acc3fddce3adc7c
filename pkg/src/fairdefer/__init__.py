"""Fairness-regularized classifiers that can pass (reject or defer) to a
downstream decision-maker, with simulators and experiment harness."""

__version__ = "0.1.0"
