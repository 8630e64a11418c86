"""Super-resolving neural radiance fields, CPU-only and desk-scale.

Trains a coarse/fine positional-encoded MLP field with sub-pixel
supersampled supervision so novel views can be rendered above the training
resolution, then optionally sharpens rendered patches with a depth-guided
refinement network fed from a single high-resolution reference view.
"""

__version__ = "0.1.0"
