"""Mixed-augmentation, pseudo-box-mixing training for a tiny grid detector."""

__version__ = "0.1.0"
