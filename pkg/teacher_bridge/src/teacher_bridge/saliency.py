"""Gradient saliency maps and threshold/blur background removal.

The saliency score of an image is the cosine similarity between its
embedding and the embedding of a fixed prompt. Backpropagating that score
to the input yields a per-pixel relevance map; pixels whose normalized
relevance clears the threshold keep their exact values, the rest are
replaced with a Gaussian-blurred copy of the image. The blur is computed
once over the full image and composited, which avoids boundary artifacts
around the kept region.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import image_to_tensor
from .errors import ShapeMismatchError


@dataclass(frozen=True)
class SaliencyConfig:
    prompt: str = "a photo of a human"
    lambda_thresh: float = 0.6
    blur_kernel: int = 30
    signed: bool = False        # sum signed gradients instead of magnitudes
    target_region: Optional[np.ndarray] = None  # optional HxW mask for T

    def __post_init__(self):
        if not 0.0 <= self.lambda_thresh <= 1.0:
            raise ValueError("lambda_thresh must be in [0, 1]")
        if self.blur_kernel < 1:
            raise ValueError("blur_kernel must be >= 1")


def saliency_map(image: np.ndarray, encoder,
                 config: SaliencyConfig = SaliencyConfig()):
    """Raw per-pixel relevance map M and its min-max normalization M'.

    M aggregates the score gradient over color channels (absolute values
    by default, signed sums behind the flag). A constant-gradient image
    normalizes to all zeros with a warning.
    """
    img_t = image_to_tensor(image, dtype=encoder.dtype)
    img_t.requires_grad_(True)
    emb = encoder.embed_image_tensor(img_t)
    prompt_emb = encoder.embed_texts([config.prompt]).to(emb.dtype)
    score = F.cosine_similarity(emb, prompt_emb).squeeze()
    score.backward()
    grad = img_t.grad[0]                       # (3, H, W)
    if config.signed:
        m = grad.sum(dim=0)
    else:
        m = grad.abs().sum(dim=0)
    m = m.detach().cpu().numpy().astype(np.float64)
    if config.target_region is not None:
        region = np.asarray(config.target_region, dtype=bool)
        if region.shape != m.shape:
            raise ShapeMismatchError(
                f"target region {region.shape} vs image {m.shape}")
        m = np.where(region, m, 0.0)
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        warnings.warn("degenerate saliency map (constant gradient); "
                      "normalized map is all zeros")
        m_norm = np.zeros_like(m)
    else:
        m_norm = (m - lo) / (hi - lo)
    return m, m_norm


def gaussian_kernel(size: int, sigma: Optional[float] = None) -> np.ndarray:
    """Normalized 2-d Gaussian; even sizes center on the half-pixel."""
    if sigma is None:
        sigma = size / 6.0
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, kernel_size: int,
                  sigma: Optional[float] = None) -> np.ndarray:
    """Full-image blur with reflect padding; returns float64 HxWx3."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64)
    else:
        arr = arr.astype(np.float64)
    kernel = torch.as_tensor(gaussian_kernel(kernel_size, sigma))
    kernel = kernel.expand(3, 1, kernel_size, kernel_size)
    x = torch.as_tensor(arr).permute(2, 0, 1).unsqueeze(0)
    left = (kernel_size - 1) // 2
    right = kernel_size - 1 - left
    x = F.pad(x, (left, right, left, right), mode="reflect")
    out = F.conv2d(x, kernel, groups=3)
    return out[0].permute(1, 2, 0).numpy()


def apply_mask(image: np.ndarray, m_norm: np.ndarray,
               config: SaliencyConfig = SaliencyConfig()) -> np.ndarray:
    """Keep pixels with M' above the threshold bit-identical; everything
    else comes from the blurred image."""
    arr = np.asarray(image)
    m_norm = np.asarray(m_norm)
    if m_norm.shape != arr.shape[:2]:
        raise ShapeMismatchError(
            f"mask {m_norm.shape} does not match image {arr.shape[:2]}")
    blurred = gaussian_blur(arr, config.blur_kernel)
    if arr.dtype == np.uint8:
        blurred = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
    else:
        blurred = blurred.astype(arr.dtype)
    keep = (m_norm > config.lambda_thresh)[:, :, None]
    return np.where(keep, arr, blurred)


def mask_image(image: np.ndarray, encoder,
               config: SaliencyConfig = SaliencyConfig()):
    """Convenience: saliency map then composite. Returns (masked, m_norm)."""
    _, m_norm = saliency_map(image, encoder, config)
    return apply_mask(image, m_norm, config), m_norm
