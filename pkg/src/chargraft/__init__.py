"""Character-level word encoder/decoder retrofit for subword transformer LMs."""

__version__ = "0.1.0"
