"""Span prediction heads: independent, pointer-style conditional, matrix conditional.

All heads map an :class:`EncoderOutput` to probability tensors and record on
the active tape, so the same call serves training and inference.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .encoder import INIT_SCALE, EncoderOutput

DEFAULT_MAX_FULL_N = 1024
PROB_TOL = 1e-9


class ResourceError(RuntimeError):
    """A requested computation exceeds the configured size cap."""


@dataclass
class ProbVector:
    probs: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ValueError("ProbVector must be 1-D")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)

    def __len__(self) -> int:
        return self.probs.shape[0]

    def is_valid(self, tol: float = PROB_TOL) -> bool:
        p = self.probs
        if (p < 0).any() or not np.isfinite(p).all():
            return False
        if self.mask is not None and (p[~self.mask] != 0).any():
            return False
        return abs(p.sum() - 1.0) <= tol


@dataclass
class ProbMatrix:
    probs: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.probs.shape[1]:
            raise ValueError("ProbMatrix must be square")

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    def row(self, i: int) -> ProbVector:
        return ProbVector(self.probs[i], self.mask)

    def is_valid(self, tol: float = PROB_TOL) -> bool:
        return all(self.row(i).is_valid(tol) for i in range(self.n))


def as_prob_vector(p, mask=None) -> ProbVector:
    if isinstance(p, ProbVector):
        return p
    return ProbVector(p.data if isinstance(p, Tensor) else p, mask)


def as_prob_matrix(p, mask=None) -> ProbMatrix:
    if isinstance(p, ProbMatrix):
        return p
    return ProbMatrix(p.data if isinstance(p, Tensor) else p, mask)


def _uniform(rng, *shape):
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


# ---------------------------------------------------------------- independent

@dataclass
class IndParams:
    w_s: Tensor
    w_e: Tensor

    @classmethod
    def from_params(cls, ps: ParameterSet, prefix: str = "ind.") -> "IndParams":
        return cls(ps[prefix + "w_s"], ps[prefix + "w_e"])


def init_ind(d: int, rng: np.random.Generator, prefix: str = "ind.") -> ParameterSet:
    return ParameterSet({prefix + "w_s": _uniform(rng, d), prefix + "w_e": _uniform(rng, d)})


def ind_head(enc: EncoderOutput, params: IndParams, mask=None) -> tuple[Tensor, Tensor]:
    p_s = ad.masked_softmax(ad.matmul(enc.H, params.w_s), mask)
    p_e = ad.masked_softmax(ad.matmul(enc.H, params.w_e), mask)
    return p_s, p_e


# ---------------------------------------------------------------- pointer network

@dataclass
class VcpParams:
    v: Tensor
    V: Tensor
    W_e: Tensor
    v_Q: Tensor
    V_Q: Tensor
    cell: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def from_params(cls, ps: ParameterSet, prefix: str = "vcp.") -> "VcpParams":
        cell = {k: ps[f"{prefix}cell.{k}"] for k in ("w_in", "w_hid", "b_in", "b_hid")
                if f"{prefix}cell.{k}" in ps}
        return cls(ps[prefix + "v"], ps[prefix + "V"], ps[prefix + "W_e"],
                   ps[prefix + "v_Q"], ps[prefix + "V_Q"], cell)


def init_vcp(d: int, rng: np.random.Generator, l: int | None = None, prefix: str = "vcp.",
             with_cell: bool = True) -> ParameterSet:
    l = d if l is None else l
    ps = ParameterSet()
    ps.add(prefix + "v", _uniform(rng, l))
    ps.add(prefix + "V", _uniform(rng, l, d))
    ps.add(prefix + "W_e", _uniform(rng, l, d))
    ps.add(prefix + "v_Q", _uniform(rng, l))
    ps.add(prefix + "V_Q", _uniform(rng, l, d))
    if with_cell:
        ps.add(prefix + "cell.w_in", _uniform(rng, d, 3 * d))
        ps.add(prefix + "cell.w_hid", _uniform(rng, d, 3 * d))
        ps.add(prefix + "cell.b_in", _uniform(rng, 3 * d))
        ps.add(prefix + "cell.b_hid", _uniform(rng, 3 * d))
    return ps


def gru_cell(x: Tensor, h: Tensor, cell: dict[str, Tensor]) -> Tensor:
    """One gated recurrent step, same gate layout as :func:`autodiff.gru_sequence`."""
    hs = h.shape[0]
    gx = ad.add(ad.matmul(x, cell["w_in"]), cell["b_in"])
    gh = ad.add(ad.matmul(h, cell["w_hid"]), cell["b_hid"])
    r_idx, z_idx, n_idx = range(hs), range(hs, 2 * hs), range(2 * hs, 3 * hs)
    r = ad.sigmoid(ad.add(ad.gather(gx, r_idx), ad.gather(gh, r_idx)))
    z = ad.sigmoid(ad.add(ad.gather(gx, z_idx), ad.gather(gh, z_idx)))
    n = ad.tanh(ad.add(ad.gather(gx, n_idx), ad.mul(r, ad.gather(gh, n_idx))))
    # h' = n + z * (h - n)
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def vcp_init_state(H_Q: Tensor, params: VcpParams) -> Tensor:
    """Attention-pool the question rows into one d-vector (a convex combination)."""
    scores = ad.matmul(params.v_Q, ad.tanh(ad.matmul(params.V_Q, ad.transpose(H_Q))))
    p_init = ad.masked_softmax(scores)
    return ad.matmul(p_init, H_Q)


def vcp_pointer(H: Tensor, h: Tensor, params: VcpParams, mask=None) -> Tensor:
    n = H.shape[0]
    pre = ad.add(ad.matmul(params.V, ad.transpose(H)), ad.repeat_cols(ad.matmul(params.W_e, h), n))
    return ad.masked_softmax(ad.matmul(params.v, ad.tanh(pre)), mask)


def vcp_head(enc: EncoderOutput, params: VcpParams, mask=None) -> tuple[Tensor, Tensor]:
    h_s = vcp_init_state(enc.H_Q, params)
    p_s = vcp_pointer(enc.H, h_s, params, mask)
    c_e = ad.matmul(p_s, enc.H)
    h_e = gru_cell(c_e, h_s, params.cell)
    p_e = vcp_pointer(enc.H, h_e, params, mask)
    return p_s, p_e


# ---------------------------------------------------------------- matrix conditional

@dataclass
class MapParams:
    direction: str
    w_first: Tensor | None
    v: Tensor
    V: Tensor
    first_pointer: VcpParams | None = None

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward or backward, got {self.direction!r}")
        if self.V.shape[1] % 2 or self.V.shape[0] != self.v.shape[0]:
            raise ValueError("V must be l x 2d with l = len(v)")

    @property
    def d(self) -> int:
        return self.V.shape[1] // 2

    @classmethod
    def from_params(cls, ps: ParameterSet, direction: str = "forward",
                    prefix: str | None = None) -> "MapParams":
        prefix = prefix or map_prefix(direction)
        pointer = None
        if prefix + "first.v" in ps:
            pointer = VcpParams.from_params(ps, prefix + "first.")
        w_first = ps[prefix + "w_first"] if prefix + "w_first" in ps else None
        return cls(direction, w_first, ps[prefix + "v"], ps[prefix + "V"], pointer)


def map_prefix(direction: str) -> str:
    return {"forward": "map_f.", "backward": "map_b."}[direction]


def init_map(d: int, rng: np.random.Generator, direction: str = "forward", l: int | None = None,
             first_mode: str = "linear", prefix: str | None = None) -> ParameterSet:
    l = d if l is None else l
    prefix = prefix or map_prefix(direction)
    ps = ParameterSet()
    if first_mode == "linear":
        ps.add(prefix + "w_first", _uniform(rng, d))
    elif first_mode == "pointer":
        ps = ps.merge(init_vcp(d, rng, l, prefix=prefix + "first.", with_cell=False))
    else:
        raise ValueError(f"unknown first_mode {first_mode!r}")
    ps.add(prefix + "v", _uniform(rng, l))
    ps.add(prefix + "V", _uniform(rng, l, 2 * d))
    return ps


def map_first(enc: EncoderOutput, params: MapParams, mask=None) -> Tensor:
    """Distribution over the position chosen first (start if forward, end if backward)."""
    if params.first_pointer is not None:
        h = vcp_init_state(enc.H_Q, params.first_pointer)
        return vcp_pointer(enc.H, h, params.first_pointer, mask)
    return ad.masked_softmax(ad.matmul(enc.H, params.w_first), mask)


class RowScorer:
    """Computes conditional-row logits for one encoded passage.

    The pair projection V [H[j] ; H[i]] splits into a column half and a row
    half; both are computed once for all positions and shared across rows.
    """

    def __init__(self, H: Tensor, params: MapParams):
        self.H = H
        self.params = params
        self.n = H.shape[0]
        d = params.d
        V_col = ad.gather(params.V, range(d), axis=1)
        V_row = ad.gather(params.V, range(d, 2 * d), axis=1)
        self.col_proj = ad.matmul(H, ad.transpose(V_col))
        self.row_proj = ad.matmul(H, ad.transpose(V_row))
        self.width = params.V.shape[0]

    def logits(self, i: int, cols: Sequence[int] | None = None) -> Tensor:
        if not 0 <= i < self.n:
            raise IndexError(f"row index {i} out of range for n={self.n}")
        proj = self.col_proj
        if cols is not None:
            cols = list(cols)
            if len(set(cols)) != len(cols):
                raise IndexError("column indices must be distinct")
            proj = ad.gather(proj, cols, axis=0)
        c = proj.shape[0]
        row_term = ad.reshape(ad.gather(self.row_proj, [i], axis=0), (self.width,))
        tiled = ad.transpose(ad.repeat_cols(row_term, c))
        return ad.rowwise_dot(ad.tanh(ad.add(proj, tiled)), self.params.v)


def map_conditional_row(H: Tensor, i: int, params: MapParams, cols: Sequence[int] | None = None,
                        mask=None) -> Tensor:
    """Row ``i`` of the conditional matrix.

    Without ``cols`` this is the normalized row (probabilities over all n
    columns). With ``cols`` it returns raw logits at those columns only;
    normalization is left to the caller.
    """
    logits = RowScorer(H, params).logits(i, cols)
    if cols is not None:
        return logits
    return ad.masked_softmax(logits, mask)


def stacked_row_logits(H: Tensor, i: int, params: MapParams) -> Tensor:
    """Reference form of a row's logits: v^T tanh(V [H^T ; repeat(H[i])])."""
    n, d = H.shape
    h_i = ad.reshape(ad.gather(H, [i], axis=0), (d,))
    stacked = ad.concat_rows(ad.transpose(H), ad.repeat_cols(h_i, n))
    return ad.matmul(params.v, ad.tanh(ad.matmul(params.V, stacked)))


def map_full_logits(enc: EncoderOutput, params: MapParams,
                    max_n: int = DEFAULT_MAX_FULL_N) -> Tensor:
    n = enc.n
    if n > max_n:
        raise ResourceError(
            f"full {n}x{n} conditional matrix exceeds cap n={max_n}; use sampled training")
    scorer = RowScorer(enc.H, params)
    return ad.stack_rows([scorer.logits(i) for i in range(n)])


def map_full_matrix(enc: EncoderOutput, params: MapParams, mask=None,
                    max_n: int = DEFAULT_MAX_FULL_N) -> Tensor:
    """Row-stochastic n x n matrix; row i conditions on position i chosen first."""
    return ad.masked_softmax(map_full_logits(enc, params, max_n), mask)
