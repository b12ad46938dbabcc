"""Teacher-side tooling for the radar distillation pipeline.

Wraps a vision-language model to produce image/text embeddings, computes
gradient saliency maps for background blurring, synchronizes camera and
radar timestamps, and exports the radar pipeline's JSONL wire formats.
"""

from .encoders import ClipEncoder, TinyEncoder, get_encoder, image_to_tensor
from .saliency import (SaliencyConfig, apply_mask, gaussian_blur,
                       gaussian_kernel, mask_image, saliency_map)
from .sync import SyncConfig, sync_offsets, synchronize

__version__ = "0.1.0"
