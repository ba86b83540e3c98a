"""Deterministic simulator for trust-weighted federated learning of multimodal additive models."""

__version__ = "0.1.0"
