"""Structure-aware pretraining and intent-guided extractor matching for search relevance."""

__version__ = "0.1.0"
