import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from dataprep.transforms import LocationRecord, ViewPair
from networks.decoders import ReconDecoderSpec, ReconstructionDecoder, SegDecoderSpec, SegmentationHead
from networks.encoder import ContrastEncoder, EncoderSpec, count_parameters
from networks.fusion import fuse_global_local

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkSpec:
    encoder: EncoderSpec
    reconstruction: ReconDecoderSpec
    segmentation: SegDecoderSpec

    @classmethod
    def from_config(cls, config: Dict) -> 'NetworkSpec':
        section = dict(config['networks'])
        section['img_size'] = config.get('dataprep', {}).get('view_size', 256)
        return cls(
            encoder=EncoderSpec.from_section(section),
            reconstruction=ReconDecoderSpec.from_section(section),
            segmentation=SegDecoderSpec.from_section(section),
        )

    @classmethod
    def from_dict(cls, data: Dict) -> 'NetworkSpec':
        return cls(
            encoder=EncoderSpec(**data['encoder']),
            reconstruction=ReconDecoderSpec(**data['reconstruction']),
            segmentation=SegDecoderSpec(**data['segmentation']),
        )

    def to_dict(self) -> Dict:
        return asdict(self)


class MaskedAutoencoder(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.encoder = ContrastEncoder(spec.encoder)
        self.decoder = ReconstructionDecoder(spec.encoder, spec.reconstruction)

    def forward(self, view: torch.Tensor):
        """Returns ``(reconstruction, encoder_features, decoder_features)``."""
        features = self.encoder(view)
        reconstruction, decoder_features = self.decoder(features)
        return reconstruction, features, decoder_features


@dataclass
class SegmentationOutput:
    logits: torch.Tensor
    global_logits: torch.Tensor
    local_features: torch.Tensor
    global_features: torch.Tensor
    decoder_features: torch.Tensor


class ContrastSegmenter(nn.Module):
    """Encoder g plus segmentation decoder f with global-local fusion."""

    def __init__(self, spec: NetworkSpec,
                 encoder: Optional[ContrastEncoder] = None,
                 reconstruction: Optional[ReconstructionDecoder] = None):
        super().__init__()
        self.spec = spec
        self.encoder = encoder if encoder is not None else ContrastEncoder(spec.encoder)
        self.head = SegmentationHead(spec.encoder, spec.segmentation)
        # kept only to supply decoder features for consistency terms
        self.reconstruction = reconstruction

    @classmethod
    def from_mae(cls, mae: MaskedAutoencoder, keep_reconstruction: bool = False) -> 'ContrastSegmenter':
        return cls(mae.spec, encoder=mae.encoder, reconstruction=mae.decoder if keep_reconstruction else None)

    def forward(self, local: torch.Tensor, global_view: torch.Tensor,
                locations: Union[LocationRecord, Sequence[LocationRecord]]) -> SegmentationOutput:
        feat_local = self.encoder(local)
        feat_global = self.encoder(global_view)
        logits, decoder_features = self.head(fuse_global_local(feat_local, feat_global, locations))
        global_logits, _ = self.head(feat_global)
        return SegmentationOutput(logits, global_logits, feat_local, feat_global, decoder_features)

    def segment(self, local: torch.Tensor, global_view: torch.Tensor,
                locations: Union[LocationRecord, Sequence[LocationRecord]]) -> torch.Tensor:
        feat_local = self.encoder(local)
        feat_global = self.encoder(global_view)
        logits, _ = self.head(fuse_global_local(feat_local, feat_global, locations))
        return logits

    def segment_global(self, global_view: torch.Tensor) -> torch.Tensor:
        logits, _ = self.head(self.encoder(global_view))
        return logits


def _seeded(builder, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return builder()


def build_mae(spec: NetworkSpec, seed: int) -> MaskedAutoencoder:
    model = _seeded(lambda: MaskedAutoencoder(spec), seed)
    logger.info(f"Built masked autoencoder with {count_parameters(model)} parameters (seed {seed})")
    return model


def build_segmenter(spec: NetworkSpec, seed: int, mae: Optional[MaskedAutoencoder] = None,
                    keep_reconstruction: bool = False) -> ContrastSegmenter:
    if mae is not None:
        if mae.spec != spec:
            raise ValueError("Autoencoder was built for a different network spec")
        model = _seeded(lambda: ContrastSegmenter.from_mae(mae, keep_reconstruction), seed)
    else:
        model = _seeded(lambda: ContrastSegmenter(spec), seed)
    logger.info(f"Built segmenter with {count_parameters(model)} parameters (seed {seed})")
    return model


def _as_batch(view: np.ndarray, device) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(view), dtype=torch.float32, device=device)[None, None]


def _device_of(model: nn.Module):
    return next(model.parameters()).device


@torch.no_grad()
def segment(model: ContrastSegmenter, view_pair: ViewPair) -> torch.Tensor:
    """Fused-path logits ``(1, K, S, S)`` for one prepared view pair."""
    device = _device_of(model)
    return model.segment(_as_batch(view_pair.local, device), _as_batch(view_pair.global_view, device),
                         view_pair.location)


@torch.no_grad()
def segment_global(model: ContrastSegmenter, global_view: np.ndarray) -> torch.Tensor:
    return model.segment_global(_as_batch(global_view, _device_of(model)))
