"""Context-aware fine-tuning experiments: cross-attention context fusion,
generated context text, and a distilled context student."""

__version__ = "0.1.0"
