"""Visual-concept refined Transformer captioning on a numpy autodiff engine."""

__version__ = "0.1.0"
