"""Multi-identity free-viewpoint articulated human rendering.

One shared volumetric model represents several articulated subjects at
once: per-subject learnable codes condition a canonical radiance MLP,
a pose-driven cross-attention refines those codes for non-rigid offsets,
and an inverse linear-blend-skinning transform maps posed points back to
the shared canonical frame before rendering.
"""

__version__ = "0.1.0"
