"""edje: cached-vision joint-encoder reranking for image-text retrieval."""

__version__ = "0.1.0"
