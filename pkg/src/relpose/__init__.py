"""Learned relative camera pose from keypoint/descriptor grids.

Subpackages and modules:

- ``autodiff``: reverse-mode tape over numpy arrays
- ``hilbert``: pseudo-Hilbert flattening of 2D grids
- ``features``: feature grids and the trainable keypoint head
- ``matching``: correlation volume and the 3D conv matching layer
- ``geometry``: cameras, P3P, RANSAC, Levenberg-Marquardt
- ``losses``, ``trainer``: training objective and ADAM loop
- ``synth``: synthetic scenes with exact ground truth
- ``localize``: pairwise evaluation and retrieval-based localization
"""

__version__ = "0.1.0"
