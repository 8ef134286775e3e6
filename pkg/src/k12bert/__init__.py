"""K-12 education corpus curation, masked-LM continued pretraining and taxonomy tagging."""

__version__ = "0.1.0"
