"""Pool-based active-learning experimentation harness: margin sampling
under model switches, label revisions, and data expiration."""

__version__ = "0.1.0"
