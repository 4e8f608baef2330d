"""Monocular image to bird's-eye-view semantic maps, one image column per polar ray.

Subpackages and modules:

- ``numerics``: reverse-mode autodiff on numpy arrays, gradient checks, tensor files
- ``attention``: soft multi-head attention and transformer layers
- ``monotonic``: monotonic attention with infinite lookback
- ``geometry``: intrinsics, polar grids and polar-to-BEV resampling
- ``model``: the network, Dice loss and checkpoints
- ``synthdata`` / ``dataset``: synthetic scenes and their on-disk form
- ``train``: optimisation loop and IoU
- ``cli``: ``polarbev gen|train|eval|infer``
"""

__version__ = "0.1.0"
