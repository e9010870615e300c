from .core import (
    CorruptedExample,
    Sentinels,
    SpanSet,
    attention_allowed,
    attention_mask,
    corrupt,
    iter_token_file,
    read_examples,
    reconstruct,
    sample_spans,
    write_examples,
)
from .kernels import IMPLEMENTATION

__all__ = [
    "CorruptedExample",
    "IMPLEMENTATION",
    "Sentinels",
    "SpanSet",
    "attention_allowed",
    "attention_mask",
    "corrupt",
    "iter_token_file",
    "read_examples",
    "reconstruct",
    "sample_spans",
    "write_examples",
]
