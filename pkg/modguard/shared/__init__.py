"""Shared building blocks: signals, models, attacks, training, rejection and evaluation."""
