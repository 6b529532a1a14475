"""DenseNet+BAM encoder, coverage attention and gated-input GRU decoder for handwritten math recognition."""

__version__ = "0.1.0"
