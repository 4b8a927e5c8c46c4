"""Click-supervised pseudo ground-truth boxes.

Center clicks pick object proposals; a small classifier trained on those
proposals yields gradient-based activation maps (spatial-attention CAM or
Grad-CAM), which are fused per click, thresholded, and turned into boxes
that are symmetric about the click.
"""

from .geometry import Box, Click

__version__ = "0.1.0"

__all__ = ["Box", "Click", "__version__"]
