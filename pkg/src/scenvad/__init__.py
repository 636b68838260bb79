"""Scenario-adaptive video anomaly detection via few-shot meta-learning."""

__version__ = "0.1.0"
