"""Recurrent neural estimation of bilateral migration flows from stocks, flows and covariates."""

__version__ = "0.1.0"
