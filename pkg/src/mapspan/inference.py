"""Span search over start/end probabilities and the two-direction ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import (as_prob_matrix, as_prob_vector, ind_head, map_first, map_full_matrix,
                    vcp_head)

STRATEGIES = ("ind", "vcp", "map-forward", "map-backward", "map-ensemble")


class StrategyError(ValueError):
    """The requested strategy does not fit the model."""


@dataclass(frozen=True)
class SpanPrediction:
    s: int
    e: int
    score: float
    direction: str = "forward"

    def __post_init__(self):
        if self.s > self.e:
            raise ValueError(f"span start {self.s} after end {self.e}")


@dataclass(frozen=True)
class SearchConfig:
    max_span_len: int | None = None
    ensemble_k: int = 20

    def __post_init__(self):
        if self.max_span_len is not None and self.max_span_len < 1:
            raise ValueError("max_span_len must be >= 1 or None")
        if self.ensemble_k < 1:
            raise ValueError("ensemble_k must be >= 1")


def feasible_mask(n: int, max_span_len: int | None) -> np.ndarray:
    i, j = np.indices((n, n))
    ok = i <= j
    if max_span_len is not None:
        ok &= (j - i) < max_span_len
    return ok


def _scores(p_first, P_cond, direction: str) -> np.ndarray:
    """Score matrix indexed [start, end]."""
    p = as_prob_vector(p_first).probs
    P = as_prob_matrix(P_cond).probs
    if P.shape != (p.shape[0], p.shape[0]):
        raise ValueError(f"conditional matrix {P.shape} does not match vector length {p.shape[0]}")
    if direction == "forward":
        return p[:, None] * P
    if direction == "backward":
        return (p[:, None] * P).T
    raise ValueError(f"unknown direction {direction!r}")


def _best(S: np.ndarray, cfg: SearchConfig, direction: str) -> SpanPrediction:
    masked = np.where(feasible_mask(S.shape[0], cfg.max_span_len), S, -np.inf)
    flat = int(np.argmax(masked))  # first maximum in row-major order: smallest s, then e
    s, e = divmod(flat, S.shape[0])
    return SpanPrediction(s, e, float(S[s, e]), direction)


def search_vector(p_s, p_e, cfg: SearchConfig = SearchConfig()) -> SpanPrediction:
    p_s = as_prob_vector(p_s).probs
    p_e = as_prob_vector(p_e).probs
    if p_s.shape != p_e.shape or p_s.shape[0] == 0:
        raise ValueError("start and end vectors must be nonempty and of equal length")
    return _best(np.outer(p_s, p_e), cfg, "forward")


def search_matrix(p_first, P_cond, direction: str = "forward",
                  cfg: SearchConfig = SearchConfig()) -> SpanPrediction:
    return _best(_scores(p_first, P_cond, direction), cfg, direction)


def top_k_pairs(p_first, P_cond, direction: str = "forward",
                cfg: SearchConfig = SearchConfig()) -> list[SpanPrediction]:
    """The ``ensemble_k`` best feasible spans, by descending score then (s, e)."""
    S = _scores(p_first, P_cond, direction)
    s_idx, e_idx = np.nonzero(feasible_mask(S.shape[0], cfg.max_span_len))
    vals = S[s_idx, e_idx]
    order = np.lexsort((e_idx, s_idx, -vals))[: cfg.ensemble_k]
    return [SpanPrediction(int(s_idx[o]), int(e_idx[o]), float(vals[o]), direction) for o in order]


def ensemble(forward: list[SpanPrediction], backward: list[SpanPrediction]) -> SpanPrediction:
    """Best of the forward list and the backward pairs not already in it."""
    if not forward:
        raise ValueError("forward candidate list is empty")
    seen = {(p.s, p.e) for p in forward}
    pool = list(forward) + [p for p in backward if (p.s, p.e) not in seen]
    rank = {"forward": 0, "backward": 1}
    return min(pool, key=lambda p: (-p.score, rank.get(p.direction, 2), p.s, p.e))


def predict(model, example, strategy: str, cfg: SearchConfig = SearchConfig()) -> SpanPrediction:
    """Run the encoder and head of ``model`` on one example and search a span."""
    if strategy not in STRATEGIES:
        raise StrategyError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    head = model.cfg.head
    wanted = {"ind": "ind", "vcp": "vcp"}.get(strategy, "map")
    if head != wanted:
        raise StrategyError(f"strategy {strategy!r} needs a {wanted} head, model has {head!r}")
    if strategy == "map-ensemble" and not model.has_direction("backward"):
        raise StrategyError("map-ensemble needs a checkpoint trained with both directions")
    if strategy in ("map-forward", "map-ensemble") and not model.has_direction("forward"):
        raise StrategyError(f"{strategy} needs forward-direction parameters")
    if strategy == "map-backward" and not model.has_direction("backward"):
        raise StrategyError("map-backward needs backward-direction parameters")

    enc = model.encode(*model.ids(example))
    if strategy == "ind":
        return search_vector(*(t.data for t in ind_head(enc, model.ind_params())), cfg)
    if strategy == "vcp":
        return search_vector(*(t.data for t in vcp_head(enc, model.vcp_params())), cfg)

    def matrices(direction):
        mp = model.map_params(direction)
        return map_first(enc, mp).data, map_full_matrix(enc, mp).data

    if strategy == "map-forward":
        return search_matrix(*matrices("forward"), "forward", cfg)
    if strategy == "map-backward":
        return search_matrix(*matrices("backward"), "backward", cfg)
    F = top_k_pairs(*matrices("forward"), "forward", cfg)
    B = top_k_pairs(*matrices("backward"), "backward", cfg)
    return ensemble(F, B)
