"""Lead-sheet to full-band accompaniment arrangement at desk scale."""

__version__ = "0.1.0"
