"""Large-margin embeddings of sparse relevance matrices."""

__version__ = "0.1.0"
