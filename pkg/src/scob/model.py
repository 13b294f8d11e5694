"""Desk-scale encoder-decoder for read-style pre-training.

A plain patch-embedding transformer encodes the image; an autoregressive
transformer decoder with causal self-attention and cross-attention produces
per-position hidden states, a linear token head, and a 2-layer MLP projector
whose L2-normalized output feeds the contrastive loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    image_side: int = 128
    patch_size: int = 16
    enc_dim: int = 96
    enc_layers: int = 2
    enc_heads: int = 4
    dec_dim: int = 96
    dec_layers: int = 2
    dec_heads: int = 4
    max_len: int = 512
    projector_hidden: int = 128
    projector_out: int = 128
    encoder_pos_embed: bool = True

    def validate(self) -> None:
        if self.image_side % self.patch_size != 0:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_size {self.patch_size}"
            )
        if self.max_len < 8:
            raise ConfigError(f"max_len must be >= 8, got {self.max_len}")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size implausibly small")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigError("model dims must be divisible by head counts")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2


@dataclass
class DecoderOutput:
    logits: Tensor  # B x N x vocab
    hidden: Tensor  # B x N x dec_dim, the states the head reads


class Attention(nn.Module):
    """Multi-head attention; self-attention when kv is the query stream."""

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, kv: Tensor, attn_mask: Optional[Tensor] = None) -> Tensor:
        b, n, _ = x.shape
        m = kv.shape[1]
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(kv).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(kv).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores + attn_mask
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, -1)
        return self.out(y)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        x = x + self.mlp(self.norm2(x))
        return x


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mem_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, kv_dim=mem_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor, memory: Tensor, causal_mask: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, attn_mask=causal_mask)
        x = x + self.cross_attn(self.norm2(x), memory)
        x = x + self.mlp(self.norm3(x))
        return x


class Projector(nn.Module):
    """2-layer MLP into the contrastive subspace; callers normalize the output."""

    def __init__(self, in_dim: int, hidden: int = 128, out_dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class ScobModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.patch_embed = nn.Conv2d(3, c.enc_dim, c.patch_size, stride=c.patch_size)
        if c.encoder_pos_embed:
            self.enc_pos = nn.Parameter(torch.zeros(1, c.num_patches, c.enc_dim))
        else:
            self.enc_pos = None
        self.enc_blocks = nn.ModuleList(EncoderBlock(c.enc_dim, c.enc_heads) for _ in range(c.enc_layers))
        self.enc_norm = nn.LayerNorm(c.enc_dim)

        self.tok_embed = nn.Embedding(c.vocab_size, c.dec_dim)
        self.dec_pos = nn.Parameter(torch.zeros(1, c.max_len, c.dec_dim))
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(c.dec_dim, c.dec_heads, c.enc_dim) for _ in range(c.dec_layers)
        )
        self.dec_norm = nn.LayerNorm(c.dec_dim)
        self.head = nn.Linear(c.dec_dim, c.vocab_size)
        self.projector = Projector(c.dec_dim, c.projector_hidden, c.projector_out)
        self.apply(self._init)
        for pos in (self.enc_pos, self.dec_pos):
            if pos is not None:
                nn.init.normal_(pos, std=0.02)

    @staticmethod
    def _init(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Conv2d)):
            nn.init.normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode(self, images: Tensor) -> Tensor:
        """B x 3 x H x W float tensor -> B x num_patches x enc_dim."""
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (3, c.image_side, c.image_side):
            raise InputError(
                f"expected images of shape (B, 3, {c.image_side}, {c.image_side}), "
                f"got {tuple(images.shape)}"
            )
        x = self.patch_embed(images.to(self.patch_embed.weight.dtype))
        x = x.flatten(2).transpose(1, 2)
        if self.enc_pos is not None:
            x = x + self.enc_pos
        for block in self.enc_blocks:
            x = block(x)
        if self.enc_blocks:
            x = self.enc_norm(x)
        return x

    def _causal_mask(self, n: int, dtype: torch.dtype) -> Tensor:
        mask = torch.full((n, n), float("-inf"), dtype=dtype)
        return torch.triu(mask, diagonal=1)

    def decode(self, memory: Tensor, input_ids: Tensor) -> DecoderOutput:
        c = self.config
        if input_ids.ndim != 2:
            raise InputError("input_ids must be B x N")
        n = input_ids.shape[1]
        if n > c.max_len:
            raise InputError(f"sequence length {n} exceeds max_len {c.max_len}")
        if int(input_ids.max()) >= c.vocab_size or int(input_ids.min()) < 0:
            raise InputError("token id outside vocabulary")
        x = self.tok_embed(input_ids) + self.dec_pos[:, :n]
        mask = self._causal_mask(n, x.dtype)
        for block in self.dec_blocks:
            x = block(x, memory, mask)
        hidden = self.dec_norm(x)
        return DecoderOutput(logits=self.head(hidden), hidden=hidden)

    def forward_teacher_forced(self, images: Tensor, input_ids: Tensor) -> DecoderOutput:
        return self.decode(self.encode(images), input_ids)

    def project(self, hidden: Tensor) -> Tensor:
        """Map decoder states to unit-norm contrastive embeddings."""
        z = self.projector(hidden)
        return F.normalize(z, dim=-1, eps=1e-12)

    @torch.no_grad()
    def generate(
        self,
        image: Tensor,
        prompt_id: int,
        max_len: Optional[int] = None,
        start_id: int = 0,
        eos_id: int = 1,
    ) -> list[int]:
        """Greedy decoding; returns [prompt_id, ..., eos_id?] capped at max_len tokens."""
        limit = min(max_len or self.config.max_len, self.config.max_len)
        if image.ndim == 3:
            image = image.unsqueeze(0)
        memory = self.encode(image)
        ids = [start_id, prompt_id]
        device = memory.device
        while len(ids) - 1 < limit:
            inp = torch.tensor([ids], dtype=torch.int64, device=device)
            out = self.decode(memory, inp)
            nxt = int(out.logits[0, -1].argmax())
            ids.append(nxt)
            if nxt == eos_id:
                break
        return ids[1:]


def image_to_tensor(image: np.ndarray, image_side: Optional[int] = None) -> Tensor:
    """uint8 H x W x 3 -> float32 3 x S x S in [-1, 1], resizing when asked."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected H x W x 3 image, got shape {image.shape}")
    if image_side is not None and image.shape[:2] != (image_side, image_side):
        from PIL import Image as PILImage

        pil = PILImage.fromarray(image).resize((image_side, image_side), PILImage.BILINEAR)
        image = np.asarray(pil)
    x = torch.from_numpy(np.array(image, dtype=np.float32, copy=True))
    x = x.permute(2, 0, 1) / 127.5 - 1.0
    return x
