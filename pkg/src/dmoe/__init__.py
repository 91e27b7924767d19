"""Dynamic mixture-of-experts language modelling on synthetic multilingual corpora."""

__version__ = "0.1.0"
