from .vocab import Vocabulary, build_vocabulary
from .model import (
    ContextError,
    LmConfig,
    TinyConceptLM,
    TokenSequence,
    UndefinedLossError,
    build_sequence,
    lm_loss,
)

__all__ = [
    "ContextError",
    "LmConfig",
    "TinyConceptLM",
    "TokenSequence",
    "UndefinedLossError",
    "Vocabulary",
    "build_sequence",
    "build_vocabulary",
    "lm_loss",
]
