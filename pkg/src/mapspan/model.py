"""Encoder plus head selection, packaged with its vocabulary."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ParameterSet
from .encoder import EncoderConfig, EncoderOutput, Vocabulary, encode, init_encoder
from .heads import IndParams, MapParams, VcpParams, init_ind, init_map, init_vcp

HEADS = ("ind", "vcp", "map")
DIRECTIONS = ("forward", "backward", "both")


@dataclass
class ModelConfig:
    head: str = "map"
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(vocab_size=3))
    directions: str = "forward"
    first_mode: str = "linear"
    attn_width: int | None = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.directions not in DIRECTIONS:
            raise ValueError(f"unknown directions {self.directions!r}")
        if self.head != "map" and self.directions != "forward":
            raise ValueError("only the map head has a backward direction")

    @property
    def direction_list(self) -> list[str]:
        return ["forward", "backward"] if self.directions == "both" else [self.directions]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["encoder"] = EncoderConfig(**data["encoder"])
        return cls(**data)


class SpanModel:
    """Parameters, configuration and vocabulary of one span extractor."""

    def __init__(self, cfg: ModelConfig, params: ParameterSet, vocab: Vocabulary):
        self.cfg = cfg
        self.params = params
        self.vocab = vocab

    @classmethod
    def create(cls, cfg: ModelConfig, vocab: Vocabulary, seed: int | None = None) -> "SpanModel":
        enc_cfg = cfg.encoder
        if enc_cfg.vocab_size != len(vocab):
            raise ValueError(f"encoder vocab_size {enc_cfg.vocab_size} != vocabulary size {len(vocab)}")
        seed = enc_cfg.seed if seed is None else seed
        params = init_encoder(enc_cfg, seed)
        rng = np.random.default_rng([seed, 1])
        d, l = enc_cfg.d, cfg.attn_width
        if cfg.head == "ind":
            params = params.merge(init_ind(d, rng))
        elif cfg.head == "vcp":
            params = params.merge(init_vcp(d, rng, l))
        else:
            for direction in cfg.direction_list:
                params = params.merge(init_map(d, rng, direction, l, cfg.first_mode))
        return cls(cfg, params, vocab)

    def ids(self, example) -> tuple[list[int], list[int]]:
        return self.vocab.encode(example.question_tokens), self.vocab.encode(example.passage_tokens)

    def encode(self, question_ids, passage_ids) -> EncoderOutput:
        return encode(question_ids, passage_ids, self.params, self.cfg.encoder,
                      sep_id=self.vocab.sep_id)

    def ind_params(self) -> IndParams:
        return IndParams.from_params(self.params)

    def vcp_params(self) -> VcpParams:
        return VcpParams.from_params(self.params)

    def map_params(self, direction: str) -> MapParams:
        if direction not in self.cfg.direction_list:
            raise KeyError(f"model has no {direction} direction parameters")
        return MapParams.from_params(self.params, direction)

    def has_direction(self, direction: str) -> bool:
        return self.cfg.head == "map" and direction in self.cfg.direction_list
