"""The full matting network: backbone, encoder, decoder and predictor."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Module, Tensor
from .backbone import N_LEVELS, Backbone, Projection, project_and_flatten
from .decoder import Decoder
from .encoder import Encoder
from .predictor import predict
from .validation import check_divisible


@dataclass(frozen=True)
class ModelConfig:
    backbone_channels: tuple = (16, 32, 64, 96)
    dim: int = 32
    n_heads: int = 2
    n_points: int = 2
    n_enc: int = 1
    n_dec: int = 1
    n_queries: int = 5
    sftm_enabled: bool = True
    lqtm_enabled: bool = True
    lqtm_per_channel: bool = False
    cross_attention: str = "deformable"

    def to_dict(self):
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


PAPER_SCALE = ModelConfig(dim=256, n_heads=8, n_points=4, n_enc=2, n_dec=1)


class MattingNetwork(Module):
    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        bb_rng, proj_rng, enc_rng, dec_rng = rng.spawn(4)
        self.backbone = Backbone(bb_rng, cfg.backbone_channels)
        self.projection = Projection(proj_rng, cfg.backbone_channels, cfg.dim)
        self.encoder = Encoder(enc_rng, cfg.dim, cfg.n_heads, N_LEVELS, cfg.n_points,
                               cfg.n_enc, cfg.sftm_enabled)
        self.decoder = Decoder(dec_rng, cfg.dim, cfg.n_heads, N_LEVELS, cfg.n_points, cfg.n_dec,
                               cfg.n_queries, cfg.cross_attention, cfg.lqtm_enabled,
                               cfg.lqtm_per_channel)

    def is_backbone(self, name):
        return name.startswith("backbone.")

    def forward(self, clip):
        """Predict mattes for a (T, H, W, 3) clip; H and W must be multiples of 16."""
        x = clip if isinstance(clip, Tensor) else Tensor(np.asarray(clip, dtype=np.float64))
        check_divisible(x.shape[1], x.shape[2], 2 ** N_LEVELS)
        pyramid = self.backbone(x)
        seq = project_and_flatten(pyramid, self.projection)
        enc = self.encoder(seq)
        queries = self.decoder(enc.sequences)
        return predict(enc.fused_pyramid[0], queries.queries)

    __call__ = forward
