import logging
from dataclasses import dataclass, fields
from typing import Dict

import numpy as np
import torch
import torch.nn as nn
from timm.models.vision_transformer import Block, PatchEmbed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderSpec:
    depth: int = 8
    embed_dim: int = 512
    num_heads: int = 8
    patch_size: int = 16
    mlp_ratio: float = 4.0
    img_size: int = 256
    in_chans: int = 1

    def __post_init__(self):
        if self.img_size % self.patch_size:
            raise ValueError(f"Patch size {self.patch_size} does not divide image size {self.img_size}")
        if self.embed_dim % self.num_heads or self.embed_dim % 4:
            raise ValueError(f"embed_dim {self.embed_dim} incompatible with {self.num_heads} heads")

    @property
    def grid_size(self) -> int:
        return self.img_size // self.patch_size

    @classmethod
    def from_section(cls, section: Dict) -> 'EncoderSpec':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in known})


def get_2d_sincos_pos_embed(embed_dim: int, grid_size: int) -> np.ndarray:
    """Fixed 2D sine-cosine position table of shape (grid_size**2, embed_dim)."""
    grid_h = np.arange(grid_size, dtype=np.float64)
    grid_w = np.arange(grid_size, dtype=np.float64)
    grid = np.stack(np.meshgrid(grid_w, grid_h), axis=0).reshape(2, -1)

    def one_axis(dim, positions):
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.einsum('m,d->md', positions, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([one_axis(embed_dim // 2, grid[0]), one_axis(embed_dim // 2, grid[1])], axis=1)


def init_transformer_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.constant_(module.bias, 0)
    elif isinstance(module, nn.LayerNorm):
        nn.init.constant_(module.bias, 0)
        nn.init.constant_(module.weight, 1.0)


class ContrastEncoder(nn.Module):
    """Token encoder g: a 256x256 view to a (embed_dim, 16, 16) feature grid."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.patch_embed = PatchEmbed(img_size=spec.img_size, patch_size=spec.patch_size,
                                      in_chans=spec.in_chans, embed_dim=spec.embed_dim)
        self.register_buffer(
            'pos_embed',
            torch.from_numpy(get_2d_sincos_pos_embed(spec.embed_dim, spec.grid_size)).float()[None],
            persistent=False,
        )
        self.blocks = nn.ModuleList([
            Block(spec.embed_dim, spec.num_heads, spec.mlp_ratio, qkv_bias=True, norm_layer=nn.LayerNorm)
            for _ in range(spec.depth)
        ])
        self.norm = nn.LayerNorm(spec.embed_dim)

        w = self.patch_embed.proj.weight.data
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        self.apply(init_transformer_weights)

    def forward(self, view: torch.Tensor) -> torch.Tensor:
        expected = (self.spec.in_chans, self.spec.img_size, self.spec.img_size)
        if view.dim() != 4 or tuple(view.shape[1:]) != expected:
            raise ValueError(f"Encoder expects (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(view.shape)}")
        tokens = self.patch_embed(view) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        side = self.spec.grid_size
        return tokens.transpose(1, 2).reshape(view.shape[0], self.spec.embed_dim, side, side)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
