"""Context-aware temporal forgery localization on instant-feature sequences."""

__version__ = "0.1.0"
