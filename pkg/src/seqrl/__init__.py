"""Reinforcement-learning fine-tuning of small sequence generators."""
from .core import AMINO_ACIDS, Alphabet, CategoricalDist, RngStream, as_sequence, shannon_entropy, softmax, top_p_filter
from .exceptions import (
    DivergedError,
    DuplicateVariant,
    InvalidAction,
    InvalidConfig,
    InvalidInput,
    ParseError,
    SeqRLError,
)

__version__ = "0.1.0"

__all__ = [
    "AMINO_ACIDS", "Alphabet", "CategoricalDist", "DivergedError", "DuplicateVariant", "InvalidAction",
    "InvalidConfig", "InvalidInput", "ParseError", "RngStream", "SeqRLError", "as_sequence",
    "shannon_entropy", "softmax", "top_p_filter", "__version__",
]
