"""Image and text encoders producing per-patch and per-token embeddings.

Two backbones share one interface:

    encode_image(PIL.Image) -> (p, d) float32 patch-token matrix
    encode_text(str)        -> (t, d) float32 text-token matrix
    properties: patch_tokens, text_tokens, dim, name

PatchStatsBackbone is self-contained and bit-deterministic: the image is
resampled to a square grid, cut into 32x32 patches, and each patch's raw
pixels are projected with a seed-fixed random matrix. It exists so the
export pipeline and its consumers can run end to end without any model
weights. CLIPBackbone adapts a transformers CLIP checkpoint when one is
available locally; pooling layers are ignored and the per-token hidden
states are exported. Both keep every patch token (no pooled summary).
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

PATCH_SIDE = 32


def _seeded_normal(tag: str, shape, scale: float = 1.0) -> np.ndarray:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    gen = np.random.Generator(np.random.Philox(int.from_bytes(digest, "little")))
    return (gen.normal(size=shape) * scale).astype(np.float32)


class PatchStatsBackbone:
    """Deterministic projection backbone; no learned weights.

    resolution must be a multiple of 32; p = (resolution / 32)^2 like a
    stride-32 vision transformer grid (320 -> 100 patches).
    """

    def __init__(self, resolution: int = 320, dim: int = 64, text_tokens: int = 16):
        if resolution < PATCH_SIDE or resolution % PATCH_SIDE:
            raise ValueError(f"resolution must be a positive multiple of "
                             f"{PATCH_SIDE}, got {resolution}")
        if dim < 1 or text_tokens < 1:
            raise ValueError("dim and text_tokens must be positive")
        self.resolution = resolution
        self.dim = dim
        self.text_tokens = text_tokens
        self.grid = resolution // PATCH_SIDE
        self.patch_tokens = self.grid * self.grid
        self.name = f"patch-stats-r{resolution}-d{dim}"
        # one fixed projection from raw patch pixels to the embedding space
        n_px = PATCH_SIDE * PATCH_SIDE * 3
        self._proj = _seeded_normal("patch-stats/proj", (n_px, dim),
                                    scale=1.0 / np.sqrt(n_px))

    def encode_image(self, image: Image.Image) -> np.ndarray:
        rgb = image.convert("RGB").resize((self.resolution, self.resolution),
                                          Image.BILINEAR)
        px = np.asarray(rgb, dtype=np.float32) / 255.0 - 0.5
        # (grid, grid, 32, 32, 3) patch blocks, flattened row-major
        blocks = px.reshape(self.grid, PATCH_SIDE, self.grid, PATCH_SIDE, 3)
        blocks = blocks.transpose(0, 2, 1, 3, 4).reshape(self.patch_tokens, -1)
        return (blocks @ self._proj).astype(np.float32)

    def encode_text(self, query: str) -> np.ndarray:
        words = query.lower().split() or [""]
        rows = [_seeded_normal(f"patch-stats/word/{w}", (self.dim,), scale=0.5)
                for w in words[: self.text_tokens]]
        while len(rows) < self.text_tokens:
            rows.append(_seeded_normal(f"patch-stats/pad/{len(rows)}",
                                       (self.dim,), scale=0.05))
        return np.stack(rows).astype(np.float32)


class CLIPBackbone:
    """Per-token adapter over a transformers CLIP checkpoint.

    The embedding file stores one width for image and text tokens, so the
    checkpoint's vision and text hidden sizes must agree; otherwise this
    raises up front rather than silently projecting.
    """

    def __init__(self, model_or_path, resolution: int | None = None):
        import torch
        from transformers import CLIPModel, CLIPTokenizerFast

        if isinstance(model_or_path, str):
            model = CLIPModel.from_pretrained(model_or_path)
            self.name = f"clip:{model_or_path}"
        else:
            model = model_or_path
            self.name = "clip:in-memory"
        vision_dim = model.config.vision_config.hidden_size
        text_dim = model.config.text_config.hidden_size
        if vision_dim != text_dim:
            raise ValueError(
                f"vision hidden size {vision_dim} != text hidden size {text_dim}; "
                "the embedding file needs one shared width")
        self._torch = torch
        self.model = model.eval()
        vc = model.config.vision_config
        self.resolution = resolution or vc.image_size
        if self.resolution % vc.patch_size:
            raise ValueError(f"resolution {self.resolution} is not a multiple "
                             f"of the model patch size {vc.patch_size}")
        self.dim = vision_dim
        self.grid = self.resolution // vc.patch_size
        self.patch_tokens = self.grid * self.grid
        self.text_tokens = model.config.text_config.max_position_embeddings
        try:
            self._tokenizer = CLIPTokenizerFast.from_pretrained(model_or_path)
        except Exception:
            self._tokenizer = None  # in-memory models: hashed token ids

    def _pixel_tensor(self, image: Image.Image):
        rgb = image.convert("RGB").resize((self.resolution, self.resolution),
                                          Image.BICUBIC)
        px = np.asarray(rgb, dtype=np.float32) / 255.0
        mean = np.array([0.4815, 0.4578, 0.4082], dtype=np.float32)
        std = np.array([0.2686, 0.2613, 0.2758], dtype=np.float32)
        px = (px - mean) / std
        return self._torch.from_numpy(px.transpose(2, 0, 1)[None])

    def encode_image(self, image: Image.Image) -> np.ndarray:
        with self._torch.no_grad():
            out = self.model.vision_model(
                pixel_values=self._pixel_tensor(image),
                interpolate_pos_encoding=True)
        tokens = out.last_hidden_state[0, 1:]  # drop the class token
        if tokens.shape[0] != self.patch_tokens:
            raise ValueError(f"backbone produced {tokens.shape[0]} patch tokens, "
                             f"expected {self.patch_tokens}")
        return tokens.numpy().astype(np.float32)

    def _token_ids(self, query: str):
        if self._tokenizer is not None:
            enc = self._tokenizer(query, padding="max_length", truncation=True,
                                  max_length=self.text_tokens, return_tensors="pt")
            return enc["input_ids"], enc["attention_mask"]
        vocab = self.model.config.text_config.vocab_size
        words = query.lower().split()
        ids = [1 + int.from_bytes(hashlib.blake2b(w.encode(), digest_size=4)
                                  .digest(), "little") % (vocab - 2)
               for w in words[: self.text_tokens]]
        ids += [0] * (self.text_tokens - len(ids))
        t = self._torch.tensor([ids])
        return t, self._torch.ones_like(t)

    def encode_text(self, query: str) -> np.ndarray:
        ids, mask = self._token_ids(query)
        with self._torch.no_grad():
            out = self.model.text_model(input_ids=ids, attention_mask=mask)
        return out.last_hidden_state[0].numpy().astype(np.float32)


def load_backbone(spec: str, resolution: int | None = None, dim: int = 64,
                  text_tokens: int = 16):
    """Build a backbone from a CLI spec: 'patch-stats' or 'clip:<path>'."""
    if spec == "patch-stats":
        return PatchStatsBackbone(resolution=resolution or 320, dim=dim,
                                  text_tokens=text_tokens)
    if spec.startswith("clip:"):
        return CLIPBackbone(spec.split(":", 1)[1], resolution=resolution)
    raise ValueError(f"unknown backbone {spec!r}; expected 'patch-stats' "
                     "or 'clip:<model-path>'")
