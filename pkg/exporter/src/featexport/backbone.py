"""Frozen vision-transformer feature extraction.

448x448 inputs map to a 32x32 grid of patch tokens (patch size 14). Two
variants: small (384-dim) and base (768-dim). Weights load from a local
checkpoint directory or hub id when given; without weights the
architecture is instantiated with a seeded random initialization, which
keeps the full export pipeline runnable offline (features are then only
structurally meaningful, which is all the format contract needs).
"""

from __future__ import annotations

import numpy as np
import torch
from transformers import Dinov2Config, Dinov2Model

PATCH = 14
INPUT_SIZE = 448
GRID = INPUT_SIZE // PATCH  # 32

VARIANTS = {
    "small": dict(hidden_size=384, num_attention_heads=6, intermediate_size=1536),
    "base": dict(hidden_size=768, num_attention_heads=12, intermediate_size=3072),
}

# standard ImageNet statistics used by the backbone family
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class FrozenBackbone:
    def __init__(self, variant="small", weights=None, strict=False, seed=0,
                 layers=12):
        if variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {variant!r}; "
                             f"expected one of {sorted(VARIANTS)}")
        if strict:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(1)
        if weights:
            self.model = Dinov2Model.from_pretrained(weights)
        else:
            torch.manual_seed(seed)
            cfg = Dinov2Config(patch_size=PATCH, image_size=INPUT_SIZE,
                               num_hidden_layers=layers, **VARIANTS[variant])
            self.model = Dinov2Model(cfg)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.variant = variant
        self.channels = self.model.config.hidden_size

    def features(self, image):
        """(H, W, 3) uint8/float image -> (C, 32, 32) float32 patch tokens."""
        arr = prepare_image(image)
        x = torch.from_numpy(arr).unsqueeze(0)
        with torch.no_grad():
            out = self.model(pixel_values=x).last_hidden_state
        tokens = out[0, 1:]  # drop the class token
        fmap = tokens.reshape(GRID, GRID, self.channels).permute(2, 0, 1)
        return fmap.numpy().astype(np.float32)


def prepare_image(image):
    """Resize to the backbone input size and normalize; returns (3, H, W)."""
    from PIL import Image

    if isinstance(image, np.ndarray):
        img = Image.fromarray(image.astype(np.uint8))
    else:
        img = image
    img = img.convert("RGB").resize((INPUT_SIZE, INPUT_SIZE), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return arr.transpose(2, 0, 1)
