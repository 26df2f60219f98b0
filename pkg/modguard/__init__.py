"""Adversarial attacks and rejection defenses for modulation classifiers."""
