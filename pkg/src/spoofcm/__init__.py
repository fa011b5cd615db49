"""spoofcm: desk-scale audio anti-spoofing countermeasure pipeline."""

__version__ = "0.1.0"
