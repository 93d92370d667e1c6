"""End-to-end segmentation network: PGT encoder feeding the FPT decoder."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import functional as F
from .decoder import AUX_WEIGHT, DecoderOutput, FeaturePyramidTransformer, FPTConfig, micro_decoder
from .encoder import PGTConfig, PyramidGroupTransformer, micro_config, variant
from .errors import ConfigError, DimensionError
from .nn import Module
from .tensor import Tensor, add, mul


@dataclass(frozen=True)
class FTNConfig:
    encoder: PGTConfig
    decoder: FPTConfig
    seed: int = 0

    def __post_init__(self):
        if tuple(self.decoder.in_dims) != tuple(self.encoder.dims):
            raise ConfigError(f"decoder in_dims {self.decoder.in_dims} do not match "
                              f"encoder stage dims {self.encoder.dims}")

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "FTNConfig":
        return cls(PGTConfig.from_dict(data["encoder"]), FPTConfig.from_dict(data["decoder"]),
                   int(data.get("seed", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FTNConfig":
        return cls.from_dict(json.loads(text))


def micro_ftn_config(seed: int = 0, num_classes: int = 2, **decoder_kw) -> FTNConfig:
    enc = micro_config()
    return FTNConfig(enc, micro_decoder(in_dims=enc.dims, num_classes=num_classes, **decoder_kw), seed)


def variant_ftn_config(name: str, num_classes: int = 60, seed: int = 0, **decoder_kw) -> FTNConfig:
    enc = replace(variant(name), num_classes=0)
    return FTNConfig(enc, FPTConfig(in_dims=enc.dims, num_classes=num_classes, **decoder_kw), seed)


class FTNModel(Module):
    def __init__(self, config: FTNConfig):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.encoder = PyramidGroupTransformer(config.encoder, rng)
        self.decoder = FeaturePyramidTransformer(config.decoder, rng)
        self.mode = "infer"

    def train(self) -> "FTNModel":
        self.mode = "train"
        self.encoder.set_training(True)
        return self

    def eval(self) -> "FTNModel":
        self.mode = "infer"
        self.encoder.set_training(False)
        return self

    def forward(self, img, with_aux: bool | None = None) -> DecoderOutput:
        img = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=np.float32))
        if with_aux is None:
            with_aux = self.mode == "train" and self.config.decoder.aux
        return self.decoder(self.encoder(img), with_aux=with_aux)

    def logits(self, img) -> Tensor:
        return self.forward(img, with_aux=False).logits


def loss(logits: Tensor, labels, aux_logits=None, aux_weight: float = AUX_WEIGHT) -> Tensor:
    """Pixel-mean cross-entropy plus ``aux_weight`` times each branch's own loss."""
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise DimensionError(f"logits {logits.shape} do not cover labels {labels.shape}")
    total = F.cross_entropy(logits, labels)
    for aux in aux_logits or ():
        total = add(total, mul(F.cross_entropy(aux, labels), aux_weight))
    return total
