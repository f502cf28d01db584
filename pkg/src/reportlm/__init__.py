"""Semi-supervised report classification with a from-scratch BiLSTM language model."""

__version__ = "0.1.0"
