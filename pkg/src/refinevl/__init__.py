"""Two-iteration vision-language pretraining with dictionary-driven report refinement."""

__version__ = "0.1.0"
