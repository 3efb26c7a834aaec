"""Contrastive multiple instance learning for weakly labeled re-identification."""

__version__ = "0.1.0"
