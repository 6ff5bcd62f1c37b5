"""Debiased rating prediction under hidden confounding with personalized sensitivity bounds."""

__version__ = "0.1.0"
