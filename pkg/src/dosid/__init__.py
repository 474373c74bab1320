"""dosid: hierarchical semantic-ID quantization of item embeddings."""

__version__ = "0.1.0"
