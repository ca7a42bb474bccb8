"""Propensity score vs regression standardisation Monte Carlo laboratory."""
