"""Utility helpers shared across the recourse pipeline."""
