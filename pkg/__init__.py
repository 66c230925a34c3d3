"""
Decomposed SVS

Text becomes linguistic features. Features and a melody become pitch and
loudness. Everything together becomes a mel spectrogram, then audio.

Modules import each other flatly (`from dsp import extract_f0`); put the
repository root on sys.path or use the `dsvs` entry point.
"""

__version__ = "0.1.0"
