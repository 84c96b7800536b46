"""Tap-sound defect recognition: 1-D CNNs with MMD domain adaptation and
pseudo-label transfer between materials."""

__version__ = "0.1.0"
