"""prunelab: one-shot pruning and parameter-efficient retraining of a miniature GPT."""

__version__ = "0.1.0"
