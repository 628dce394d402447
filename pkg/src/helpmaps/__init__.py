"""Helpfulness metrics for attention and error heatmap explanations."""
from .core import (AttentionStack, Dataset, DegenerateStatisticError, FormatError, HelpmapsError,
                   InsufficientDataError, MissingMapError, NumericalError, Record, make_splits)
from .metrics import HelpReport, Mode, help_attention, help_error, help_joint, help_score, relevance
from .stats import VarianceMode, spearman, ztest_two_sample

__version__ = "0.1.0"

__all__ = [
    "AttentionStack", "Dataset", "DegenerateStatisticError", "FormatError", "HelpmapsError",
    "HelpReport", "InsufficientDataError", "MissingMapError", "Mode", "NumericalError", "Record",
    "VarianceMode", "help_attention", "help_error", "help_joint", "help_score", "make_splits",
    "relevance", "spearman", "ztest_two_sample",
]
