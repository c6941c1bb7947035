"""Small trainable question/passage encoder.

The question and passage are packed as ``[Q, SEP, P]`` and encoded jointly,
so passage rows are question-aware. With ``pack="qpq"`` the question is
repeated after the passage, ``[Q, SEP, P, SEP, Q]``, so that the backward
direction of a recurrent encoder also reads the question before the passage.
Two encoder kinds are available:

* ``birnn``: shared embedding followed by bidirectional GRU layers; each
  direction has ``d // 2`` units and the outputs are concatenated.
* ``attention``: embedding plus learned position vectors, one single-head
  self-attention layer with a residual tanh projection.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor

PAD, UNK, SEP = "<pad>", "<unk>", "<sep>"
INIT_SCALE = 0.08


class VocabularyError(ValueError):
    """Token id outside the vocabulary."""


class Vocabulary:
    """Injective token -> id map with reserved PAD/UNK/SEP ids 0, 1, 2."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK, SEP]
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def sep_id(self) -> int:
        return 2

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(tok, self.unk_id) for tok in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, examples, lowercase: bool = False) -> "Vocabulary":
        vocab = cls()
        for ex in examples:
            for tok in list(ex.question_tokens) + list(ex.passage_tokens):
                vocab.add(tok.lower() if lowercase else tok)
        return vocab

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: list[str]) -> "Vocabulary":
        if itos[:3] != [PAD, UNK, SEP]:
            raise VocabularyError("reserved tokens missing from vocabulary list")
        if len(set(itos)) != len(itos):
            raise VocabularyError("vocabulary list has duplicate tokens")
        vocab = cls()
        for tok in itos[3:]:
            vocab.add(tok)
        return vocab


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 32
    embed: int = 32
    kind: str = "birnn"
    layers: int = 1
    max_len: int = 128
    seed: int = 0
    pack: str = "qp"
    match: bool = False

    def __post_init__(self):
        if self.kind not in ("birnn", "attention"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.pack not in ("qp", "qpq"):
            raise ValueError(f"unknown packing {self.pack!r}")
        for field in ("vocab_size", "d", "embed", "layers", "max_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"encoder {field} must be >= 1")
        if self.kind == "birnn" and self.d % 2:
            raise ValueError("d must be even for a bidirectional encoder")


@dataclass
class EncoderOutput:
    H: Tensor
    H_Q: Tensor

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]


def _uniform(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


def init_encoder(cfg: EncoderConfig, seed: int | None = None, prefix: str = "enc.") -> ParameterSet:
    """Encoder parameters drawn from uniform(-0.08, 0.08)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    ps = ParameterSet()
    ps.add(prefix + "embed", _uniform(rng, cfg.vocab_size, cfg.embed))
    if cfg.kind == "birnn":
        hs = cfg.d // 2
        in_size = cfg.embed
        if cfg.match:
            ps.add(prefix + "match.q", _uniform(rng, cfg.embed, cfg.d))
            ps.add(prefix + "match.k", _uniform(rng, cfg.embed, cfg.d))
            ps.add(prefix + "match.v", _uniform(rng, cfg.embed, cfg.d))
            ps.add(prefix + "match.pos", _uniform(rng, cfg.max_len, cfg.d))
            in_size += cfg.d
        for layer in range(cfg.layers):
            for direction in ("fw", "bw"):
                p = f"{prefix}gru{layer}.{direction}."
                ps.add(p + "w_in", _uniform(rng, in_size, 3 * hs))
                ps.add(p + "w_hid", _uniform(rng, hs, 3 * hs))
                ps.add(p + "b_in", _uniform(rng, 3 * hs))
                ps.add(p + "b_hid", _uniform(rng, 3 * hs))
            in_size = cfg.d
    else:
        ps.add(prefix + "pos", _uniform(rng, cfg.max_len, cfg.embed))
        ps.add(prefix + "att.q", _uniform(rng, cfg.embed, cfg.d))
        ps.add(prefix + "att.k", _uniform(rng, cfg.embed, cfg.d))
        ps.add(prefix + "att.v", _uniform(rng, cfg.embed, cfg.d))
        ps.add(prefix + "att.skip", _uniform(rng, cfg.embed, cfg.d))
    return ps


def _check_ids(ids: Sequence[int], vocab_size: int, what: str) -> None:
    if len(ids) == 0:
        raise ValueError(f"{what} is empty")
    for i in ids:
        if not 0 <= i < vocab_size:
            raise VocabularyError(f"{what} id {i} outside vocabulary of size {vocab_size}")


def _question_match(x: Tensor, xq: Tensor, params: ParameterSet, cfg: EncoderConfig,
                    prefix: str) -> Tensor:
    """Attend from every packed row to the question rows.

    Keys come from question token content, values add a learned vector per
    question position, so a row can report which question index it matches.
    """
    m = xq.shape[0]
    if m > cfg.max_len:
        raise ValueError(f"question length {m} exceeds max_len {cfg.max_len}")
    q = ad.matmul(x, params[prefix + "match.q"])
    k = ad.matmul(xq, params[prefix + "match.k"])
    v = ad.add(ad.matmul(xq, params[prefix + "match.v"]),
               ad.gather(params[prefix + "match.pos"], range(m), axis=0))
    att = ad.masked_softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(cfg.d)))
    return ad.matmul(att, v)


def encode(question_ids: Sequence[int], passage_ids: Sequence[int], params: ParameterSet,
           cfg: EncoderConfig, prefix: str = "enc.", sep_id: int = 2) -> EncoderOutput:
    """Encode ``[Q, SEP, P]`` jointly and split the rows into (H, H_Q)."""
    _check_ids(question_ids, cfg.vocab_size, "question")
    _check_ids(passage_ids, cfg.vocab_size, "passage")
    m = len(question_ids)
    n = len(passage_ids)
    packed = list(question_ids) + [sep_id] + list(passage_ids)
    if cfg.pack == "qpq":
        # a trailing question copy lets the backward direction see Q before P
        packed += [sep_id] + list(question_ids)
    x = ad.gather(params[prefix + "embed"], packed, axis=0)
    if cfg.kind == "birnn":
        if cfg.match:
            x = ad.concat_cols(x, _question_match(x, ad.gather(x, range(m), axis=0), params, cfg, prefix))
        for layer in range(cfg.layers):
            outs = []
            for direction in ("fw", "bw"):
                p = f"{prefix}gru{layer}.{direction}."
                outs.append(ad.gru_sequence(
                    x, params[p + "w_in"], params[p + "w_hid"], params[p + "b_in"], params[p + "b_hid"],
                    reverse=direction == "bw"))
            x = ad.concat_cols(outs[0], outs[1])
    else:
        if len(packed) > cfg.max_len:
            raise ValueError(f"sequence length {len(packed)} exceeds max_len {cfg.max_len}")
        pos = ad.gather(params[prefix + "pos"], range(len(packed)), axis=0)
        e = ad.add(x, pos)
        q = ad.matmul(e, params[prefix + "att.q"])
        k = ad.matmul(e, params[prefix + "att.k"])
        v = ad.matmul(e, params[prefix + "att.v"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(cfg.d))
        att = ad.masked_softmax(scores)
        x = ad.tanh(ad.add(ad.matmul(att, v), ad.matmul(e, params[prefix + "att.skip"])))
    H_Q = ad.gather(x, range(m), axis=0)
    H = ad.gather(x, range(m + 1, m + 1 + n), axis=0)
    return EncoderOutput(H=H, H_Q=H_Q)
