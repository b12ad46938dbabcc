"""Vision-language encoders producing the shared 512-d embedding space.

Two backends share one interface:

* ``clip``: OpenAI's ViT-B/32 CLIP via transformers, when its weights are
  reachable (honors the TEACHER_BRIDGE_CACHE directory). This is the real
  teacher.
* ``tiny``: a small, seeded, fully deterministic torch encoder with the
  same 512-d contract. It has no semantics, but it is differentiable,
  reproducible, and available offline, which is all the saliency and
  export machinery needs for testing.

Both expose differentiable image preprocessing, so gradients reach the
original pixel values, which is what the saliency map requires.
"""
from __future__ import annotations

import hashlib
import os
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ModelUnavailableError

EMBED_DIM = 512
CACHE_ENV = "TEACHER_BRIDGE_CACHE"


def _seeded_tensor(shape, seed_text: str, std: float, dtype):
    seed = int.from_bytes(hashlib.sha256(seed_text.encode()).digest()[:8], "big")
    gen = torch.Generator().manual_seed(seed)
    return torch.empty(shape, dtype=torch.float64).normal_(
        std=std, generator=gen).to(dtype)


class TinyEncoder:
    """Deterministic stand-in teacher: conv/tanh image tower plus a
    hash-token text tower, both projecting to 512."""

    name = "tiny"

    def __init__(self, seed: int = 0, dtype=torch.float32, image_size: int = 64):
        self.dtype = dtype
        self.image_size = image_size
        tag = f"tiny{seed}"
        self.conv = [
            _seeded_tensor((16, 3, 3, 3), f"{tag}/c1", 0.3, dtype),
            _seeded_tensor((32, 16, 3, 3), f"{tag}/c2", 0.15, dtype),
            _seeded_tensor((64, 32, 3, 3), f"{tag}/c3", 0.1, dtype),
        ]
        self.fc1 = _seeded_tensor((64, 128), f"{tag}/f1", 0.2, dtype)
        self.fc2 = _seeded_tensor((128, EMBED_DIM), f"{tag}/f2", 0.1, dtype)
        self.token_dim = 64
        self.text_fc1 = _seeded_tensor((self.token_dim, 256), f"{tag}/t1", 0.3, dtype)
        self.text_fc2 = _seeded_tensor((256, EMBED_DIM), f"{tag}/t2", 0.1, dtype)
        self._token_cache: dict = {}

    def preprocess(self, images: torch.Tensor) -> torch.Tensor:
        # (B, 3, H, W) in [0, 1] -> model input; differentiable throughout
        x = F.interpolate(images, size=(self.image_size, self.image_size),
                          mode="bilinear", align_corners=False)
        return (x - 0.5) / 0.5

    def embed_preprocessed(self, x: torch.Tensor) -> torch.Tensor:
        for w in self.conv:
            x = torch.tanh(F.conv2d(x, w, stride=2, padding=1))
        x = x.mean(dim=(2, 3))
        x = torch.tanh(x @ self.fc1)
        return x @ self.fc2

    def embed_image_tensor(self, images: torch.Tensor) -> torch.Tensor:
        return self.embed_preprocessed(self.preprocess(images))

    def _token_vector(self, token: str) -> torch.Tensor:
        if token not in self._token_cache:
            self._token_cache[token] = _seeded_tensor(
                (self.token_dim,), f"token/{token}", 1.0, self.dtype)
        return self._token_cache[token]

    def embed_texts(self, texts: Sequence[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            tokens = [t for t in "".join(
                c.lower() if c.isalnum() else " " for c in text).split() if t]
            if tokens:
                bag = torch.stack([self._token_vector(t) for t in tokens]).mean(0)
            else:
                bag = torch.zeros(self.token_dim, dtype=self.dtype)
            rows.append(torch.tanh(bag @ self.text_fc1) @ self.text_fc2)
        return torch.stack(rows)


class ClipEncoder:
    """ViT-B/32 CLIP behind the same interface (requires downloadable or
    cached weights)."""

    name = "clip"
    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model_id: str = "openai/clip-vit-base-patch32"):
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as e:
            raise ModelUnavailableError(
                "transformers is not installed; install the [clip] extra"
            ) from e
        cache = os.environ.get(CACHE_ENV)
        try:
            self.model = CLIPModel.from_pretrained(model_id, cache_dir=cache)
            self.tokenizer = CLIPTokenizer.from_pretrained(model_id,
                                                           cache_dir=cache)
        except Exception as e:
            raise ModelUnavailableError(
                f"could not load {model_id}; set {CACHE_ENV} to a directory "
                f"with cached weights or use --model tiny ({e})"
            ) from e
        self.model.eval()
        self.dtype = next(self.model.parameters()).dtype
        self.image_size = self.model.config.vision_config.image_size

    def preprocess(self, images: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(images, size=(self.image_size, self.image_size),
                          mode="bilinear", align_corners=False)
        mean = torch.tensor(self.MEAN, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.STD, dtype=x.dtype).view(1, 3, 1, 1)
        return (x - mean) / std

    def embed_preprocessed(self, x: torch.Tensor) -> torch.Tensor:
        return self.model.get_image_features(pixel_values=x)

    def embed_image_tensor(self, images: torch.Tensor) -> torch.Tensor:
        return self.embed_preprocessed(self.preprocess(images))

    def embed_texts(self, texts: Sequence[str]) -> torch.Tensor:
        tokens = self.tokenizer(list(texts), padding=True, return_tensors="pt")
        with torch.no_grad():
            return self.model.get_text_features(**tokens)


def get_encoder(name: str = "tiny", seed: int = 0, dtype=torch.float32):
    if name == "tiny":
        return TinyEncoder(seed=seed, dtype=dtype)
    if name == "clip":
        return ClipEncoder()
    raise ValueError(f"unknown encoder {name!r} (choose tiny or clip)")


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 uint8 or float [0,1] array -> (1, 3, H, W) tensor in [0,1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    t = torch.as_tensor(arr, dtype=dtype).permute(2, 0, 1).unsqueeze(0)
    return t
