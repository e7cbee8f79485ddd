import math
from dataclasses import dataclass, fields
from typing import Dict, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from timm.models.vision_transformer import Block

from networks.encoder import EncoderSpec, get_2d_sincos_pos_embed, init_transformer_weights


@dataclass(frozen=True)
class ReconDecoderSpec:
    decoder_dim: int = 256
    decoder_depth: int = 2
    num_heads: int = 8

    @classmethod
    def from_section(cls, section: Dict) -> 'ReconDecoderSpec':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in known})


@dataclass(frozen=True)
class SegDecoderSpec:
    aspp_channels: int = 256
    aspp_dilations: Tuple[int, ...] = (6, 12, 18)
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, 'aspp_dilations', tuple(int(d) for d in self.aspp_dilations))
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @classmethod
    def from_section(cls, section: Dict) -> 'SegDecoderSpec':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in known})


def _norm(channels: int) -> nn.GroupNorm:
    # batch size 1 during adaptation rules out batch statistics
    return nn.GroupNorm(math.gcd(32, channels), channels)


class ReconstructionDecoder(nn.Module):
    """MAE decoder h: a feature grid back to a single-channel view.

    Returns the reconstruction together with the penultimate token grid,
    which the semantic-consistency term aligns across echoes.
    """

    def __init__(self, encoder_spec: EncoderSpec, spec: ReconDecoderSpec):
        super().__init__()
        self.encoder_spec = encoder_spec
        self.spec = spec
        self.embed = nn.Linear(encoder_spec.embed_dim, spec.decoder_dim, bias=True)
        self.register_buffer(
            'pos_embed',
            torch.from_numpy(get_2d_sincos_pos_embed(spec.decoder_dim, encoder_spec.grid_size)).float()[None],
            persistent=False,
        )
        self.blocks = nn.ModuleList([
            Block(spec.decoder_dim, spec.num_heads, 4.0, qkv_bias=True, norm_layer=nn.LayerNorm)
            for _ in range(spec.decoder_depth)
        ])
        self.norm = nn.LayerNorm(spec.decoder_dim)
        patch = encoder_spec.patch_size
        self.pred = nn.Linear(spec.decoder_dim, patch * patch * encoder_spec.in_chans, bias=True)
        self.apply(init_transformer_weights)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        p = self.encoder_spec.patch_size
        g = self.encoder_spec.grid_size
        c = self.encoder_spec.in_chans
        x = tokens.reshape(tokens.shape[0], g, g, p, p, c)
        x = torch.einsum('nhwpqc->nchpwq', x)
        return x.reshape(tokens.shape[0], c, g * p, g * p)

    def forward(self, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        b, _, g, _ = features.shape
        tokens = self.embed(features.flatten(2).transpose(1, 2)) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        penultimate = tokens.transpose(1, 2).reshape(b, self.spec.decoder_dim, g, g)
        return self.unpatchify(self.pred(tokens)), penultimate


class ASPP(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, dilations: Sequence[int]):
        super().__init__()
        branches = [nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, bias=False), _norm(out_channels), nn.ReLU(inplace=True),
        )]
        for rate in dilations:
            branches.append(nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 3, padding=rate, dilation=rate, bias=False),
                _norm(out_channels),
                nn.ReLU(inplace=True),
            ))
        self.branches = nn.ModuleList(branches)
        self.pooling = nn.Sequential(
            nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_channels, out_channels, 1, bias=False), nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv2d(out_channels * (len(dilations) + 2), out_channels, 1, bias=False),
            _norm(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outputs = [branch(x) for branch in self.branches]
        pooled = self.pooling(x)
        outputs.append(F.interpolate(pooled, size=x.shape[-2:], mode='bilinear', align_corners=False))
        return self.project(torch.cat(outputs, dim=1))


class SegmentationHead(nn.Module):
    """ASPP segmentation decoder f.

    Accepts either a fused (2C) grid or a plain global (C) grid; each has its
    own 1x1 input projection so the ASPP trunk is shared.
    """

    def __init__(self, encoder_spec: EncoderSpec, spec: SegDecoderSpec):
        super().__init__()
        self.encoder_spec = encoder_spec
        self.spec = spec
        c = encoder_spec.embed_dim
        self.fused_proj = nn.Conv2d(2 * c, c, 1)
        self.global_proj = nn.Conv2d(c, c, 1)
        self.aspp = ASPP(c, spec.aspp_channels, spec.aspp_dilations)
        self.classifier = nn.Conv2d(spec.aspp_channels, spec.num_classes, 1)

    def forward(self, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        c = self.encoder_spec.embed_dim
        if features.shape[1] == 2 * c:
            x = self.fused_proj(features)
        elif features.shape[1] == c:
            x = self.global_proj(features)
        else:
            raise ValueError(f"Segmentation head expects {c} or {2 * c} channels, got {features.shape[1]}")
        penultimate = self.aspp(x)
        logits = F.interpolate(
            self.classifier(penultimate),
            size=(self.encoder_spec.img_size, self.encoder_spec.img_size),
            mode='bilinear',
            align_corners=False,
        )
        return logits, penultimate
