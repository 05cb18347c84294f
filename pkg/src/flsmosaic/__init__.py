"""Forward-looking sonar mosaicing with score-selected (top-K) blending.

Modules: ``geometry`` (fan coordinates, SE(2)), ``frameio`` (frames, poses,
CLAHE, fan rasters), ``registration`` (Fourier-Mellin), ``stats`` (local
variance, long/short window scores), ``mosaic`` (grid, top-K blend),
``simgen`` (synthetic surveys) and ``pipeline`` (end-to-end runs).
"""

__version__ = "0.1.0"
