"""Vision-based lane-change behaviour detection.

Residual CNN (image-only and image+IMU fusion) on a small numpy autodiff
engine, a boosted-tree IMU baseline, and a synthetic highway corpus.
"""

__version__ = "0.1.0"
