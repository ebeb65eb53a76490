"""Desk-scale tooling for multi-aspect VLM re-annotation, reward-weighted
SFT data generation, instruction-injection simulation, composite-task prompt
switching, cost accounting, and results aggregation."""

__version__ = "0.1.0"
