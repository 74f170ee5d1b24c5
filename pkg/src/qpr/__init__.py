"""Question paraphrase retrieval: conv sentence encoder, smoothed metric loss, IVF-Flat index."""

__version__ = "0.1.0"
