"""polydnn: compile feed-forward networks into polynomial programs and run
them under additive secret sharing with no party-to-party communication."""

__version__ = "0.1.0"
