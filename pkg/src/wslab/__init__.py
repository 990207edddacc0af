"""Watermark stealing through noisy-embedding fine-tuning, at desk scale."""
from . import corpus, ldp, lm, steal, watermark

__version__ = "0.1.0"
__all__ = ["corpus", "ldp", "lm", "steal", "watermark"]
