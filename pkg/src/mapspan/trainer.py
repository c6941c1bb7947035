"""Sampled matrix training, losses, Adam and the epoch loop."""

from __future__ import annotations

import csv
import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tape, Tensor
from .encoder import EncoderOutput
from .heads import (MapParams, RowScorer, ind_head, map_first, map_full_matrix, vcp_head)
from .model import SpanModel

log = logging.getLogger(__name__)

NORM_MODES = ("joint-flat", "row-wise")
MATRIX_MODES = ("sampled", "full")
LOG_FLOOR = 1e-30


class TrainingError(RuntimeError):
    """Training cannot continue (bad gradient, refused configuration)."""


@dataclass
class TrainConfig:
    sample_k: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    norm_mode: str = "joint-flat"
    directions: str = "forward"
    matrix_mode: str = "sampled"
    shared_columns: bool = False
    seed: int = 0
    max_sequence: int = 512
    shuffle: bool = True

    def __post_init__(self):
        if self.sample_k < 1:
            raise ValueError("sample_k must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.matrix_mode not in MATRIX_MODES:
            raise ValueError(f"matrix_mode must be one of {MATRIX_MODES}")
        if self.directions not in ("forward", "backward", "both"):
            raise ValueError("directions must be forward, backward or both")

    @property
    def direction_list(self) -> list[str]:
        return ["forward", "backward"] if self.directions == "both" else [self.directions]


# ---------------------------------------------------------------- sampling

def sample_indices(p, truth: int, sample_k: int) -> list[int]:
    """Top ``k-1`` positions of ``p`` other than ``truth``, plus ``truth``.

    Ties go to the lower index; the result is sorted ascending and has
    ``min(k, n)`` members.
    """
    p = np.asarray(p.data if isinstance(p, Tensor) else getattr(p, "probs", p), dtype=np.float64)
    n = p.shape[0]
    if not 0 <= truth < n:
        raise IndexError(f"truth position {truth} out of range for n={n}")
    if sample_k < 1:
        raise ValueError("sample_k must be >= 1")
    k = min(sample_k, n)
    order = np.argsort(-p, kind="stable")
    picked = [int(i) for i in order if i != truth][: k - 1]
    return sorted(picked + [truth])


@dataclass
class SampledMatrix:
    row_indices: list[int]
    col_indices: list[list[int]]
    logits: Tensor
    probs: Tensor
    truth_cell: tuple[int, int]
    norm_mode: str

    @property
    def k(self) -> int:
        return len(self.row_indices)

    def global_cell(self, r: int, c: int) -> tuple[int, int]:
        return self.row_indices[r], self.col_indices[r][c]

    def check(self, truth_first: int, truth_second: int, tol: float = 1e-9) -> list[str]:
        """Invariant violations (empty when the structure is valid)."""
        problems = []
        rows = self.row_indices
        if len(set(rows)) != len(rows) or rows.count(truth_first) != 1:
            problems.append("row indices not distinct or truth row not present exactly once")
        for r, cols in enumerate(self.col_indices):
            if len(set(cols)) != len(cols) or len(cols) != len(rows):
                problems.append(f"row {r}: column indices not distinct or wrong count")
            if rows[r] == truth_first and cols.count(truth_second) != 1:
                problems.append("truth column missing from truth row")
        if self.global_cell(*self.truth_cell) != (truth_first, truth_second):
            problems.append("truth cell does not address the ground truth")
        p = self.probs.data
        if (p < 0).any():
            problems.append("negative probability")
        if self.norm_mode == "joint-flat":
            if abs(p.sum() - 1.0) > tol:
                problems.append(f"joint-flat probabilities sum to {p.sum()!r}")
        elif np.abs(p.sum(axis=1) - 1.0).max() > tol:
            problems.append("row-wise probabilities do not sum to 1")
        return problems


def _normalize(logits: Tensor, norm_mode: str) -> Tensor:
    if norm_mode == "joint-flat":
        k_rows, k_cols = logits.shape
        flat = ad.masked_softmax(ad.reshape(logits, (k_rows * k_cols,)))
        return ad.reshape(flat, (k_rows, k_cols))
    return ad.masked_softmax(logits)


def build_sampled_matrix(enc: EncoderOutput, params: MapParams, p_first, truth_first: int,
                         truth_second: int, cfg: TrainConfig,
                         indices: tuple[list[int], list[list[int]]] | None = None) -> SampledMatrix:
    """k x k slice of the conditional matrix around the ground-truth cell.

    Rows are sampled from ``p_first``. Every sampled row's logits are computed
    at all n columns, then that row's columns are sampled from its own
    provisional distribution (or, with ``shared_columns``, from the truth row's).
    ``indices`` replays a previous ``(row_indices, col_indices)`` choice, which
    keeps the objective smooth for finite-difference checks.
    """
    n = enc.n
    if not (0 <= truth_first < n and 0 <= truth_second < n):
        raise IndexError(f"truth ({truth_first}, {truth_second}) out of range for n={n}")
    if indices is None:
        rows = sample_indices(p_first, truth_first, cfg.sample_k)
    else:
        rows = list(indices[0])
    scorer = RowScorer(enc.H, params)
    row_logits = [scorer.logits(i) for i in rows]

    def provisional(z: Tensor) -> np.ndarray:
        x = z.data - z.data.max()
        e = np.exp(x)
        return e / e.sum()

    truth_r = rows.index(truth_first)
    if indices is not None:
        col_sets = [list(c) for c in indices[1]]
    elif cfg.shared_columns:
        shared = sample_indices(provisional(row_logits[truth_r]), truth_second, cfg.sample_k)
        col_sets = [shared] * len(rows)
    else:
        col_sets = [sample_indices(provisional(z), truth_second, cfg.sample_k) for z in row_logits]
    picked = [ad.gather(z, cols) for z, cols in zip(row_logits, col_sets)]
    logits = ad.stack_rows(picked)
    probs = _normalize(logits, cfg.norm_mode)
    truth_c = col_sets[truth_r].index(truth_second)
    return SampledMatrix(rows, [list(c) for c in col_sets], logits, probs, (truth_r, truth_c),
                         cfg.norm_mode)


def sampled_cell_count(n: int, k: int) -> int:
    k = min(k, n)
    return k * k


# ---------------------------------------------------------------- losses

@dataclass
class LossBreakdown:
    L_s: float
    L_e: float
    L: float


def loss_start(p_first: Tensor, truth: int, events: list | None = None,
               floor: float = LOG_FLOOR) -> Tensor:
    """Cross-entropy of a one-hot target: ``-log p[truth]`` (floored)."""
    if p_first.data[truth] < floor and events is not None:
        events.append(("start", truth))
    return ad.neg_log_at(p_first, (truth,), floor)


def loss_end_sampled(sm: SampledMatrix, events: list | None = None,
                     floor: float = LOG_FLOOR) -> Tensor:
    """Cross-entropy over the flattened sampled cells; only the truth cell contributes."""
    if sm.probs.data[sm.truth_cell] < floor and events is not None:
        events.append(("end", sm.truth_cell))
    return ad.neg_log_at(sm.probs, sm.truth_cell, floor)


def loss_end_full(P: Tensor, truth_first: int, truth_second: int, events: list | None = None,
                  floor: float = LOG_FLOOR) -> Tensor:
    if P.data[truth_first, truth_second] < floor and events is not None:
        events.append(("end", (truth_first, truth_second)))
    return ad.neg_log_at(P, (truth_first, truth_second), floor)


def total_loss(L_s, L_e):
    if isinstance(L_s, Tensor) or isinstance(L_e, Tensor):
        return ad.scale(ad.add(L_s, L_e), 0.5)
    return (L_s + L_e) / 2


def _mean(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.scale(out, 1.0 / len(terms)) if len(terms) > 1 else out


def direction_loss(enc: EncoderOutput, params: MapParams, start: int, end: int, cfg: TrainConfig,
                   events: list | None = None) -> tuple[Tensor, Tensor]:
    """(first-position loss, conditional loss) for one matrix-head direction."""
    first, second = (start, end) if params.direction == "forward" else (end, start)
    p_first = map_first(enc, params)
    L_first = loss_start(p_first, first, events)
    if cfg.matrix_mode == "full":
        if enc.n > cfg.max_sequence:
            raise TrainingError(
                f"full-matrix training refused: n={enc.n} exceeds max_sequence={cfg.max_sequence}")
        P = map_full_matrix(enc, params, max_n=cfg.max_sequence)
        L_second = loss_end_full(P, first, second, events)
    else:
        sm = build_sampled_matrix(enc, params, p_first, first, second, cfg)
        L_second = loss_end_sampled(sm, events)
    return L_first, L_second


def example_loss(model: SpanModel, question_ids, passage_ids, start: int, end: int,
                 cfg: TrainConfig, events: list | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(L_s, L_e, L) tensors for one example under the model's head."""
    enc = model.encode(question_ids, passage_ids)
    head = model.cfg.head
    if head == "ind":
        p_s, p_e = ind_head(enc, model.ind_params())
        L_s, L_e = loss_start(p_s, start, events), loss_start(p_e, end, events)
    elif head == "vcp":
        p_s, p_e = vcp_head(enc, model.vcp_params())
        L_s, L_e = loss_start(p_s, start, events), loss_start(p_e, end, events)
    else:
        firsts, seconds = [], []
        for direction in cfg.direction_list:
            a, b = direction_loss(enc, model.map_params(direction), start, end, cfg, events)
            firsts.append(a)
            seconds.append(b)
        L_s, L_e = _mean(firsts), _mean(seconds)
    return L_s, L_e, total_loss(L_s, L_e)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensor.data = tensor.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params, state


# ---------------------------------------------------------------- loop

LOG_FIELDS = ("step", "epoch", "L_s", "L_e", "L", "wall_ms")


@dataclass
class TrainResult:
    params: ParameterSet
    log: list[dict]
    clamp_events: int = 0

    def losses(self) -> list[float]:
        return [row["L"] for row in self.log]


def write_loss_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_FIELDS})


def _check_model(model: SpanModel, cfg: TrainConfig) -> None:
    if model.cfg.head == "map":
        missing = [d for d in cfg.direction_list if not model.has_direction(d)]
        if missing:
            raise TrainingError(f"model lacks parameters for direction(s) {missing}")


def train(model: SpanModel, data: Sequence, cfg: TrainConfig,
          on_step: Callable[[dict], None] | None = None,
          on_epoch: Callable[[int, list[dict]], bool] | None = None) -> TrainResult:
    """Mini-batch training; one loss-log row per optimizer step.

    Gradients of a batch are summed in example order, averaged, then applied
    with a single Adam step. Runs for ``cfg.epochs`` epochs, or until
    ``on_epoch(epoch, log)`` returns True.
    """
    if not data:
        raise ValueError("training data is empty")
    _check_model(model, cfg)
    encoded = [(model.ids(ex), ex.gold_spans[0]) for ex in data]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    params = model.params
    rows: list[dict] = []
    events: list = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(encoded)) if cfg.shuffle else np.arange(len(encoded))
        for lo in range(0, len(order), cfg.batch_size):
            t0 = time.perf_counter()
            batch = order[lo:lo + cfg.batch_size]
            total = None
            sums = [0.0, 0.0, 0.0]
            for idx in batch:
                (q_ids, p_ids), (s, e) = encoded[idx]
                with Tape() as tape:
                    L_s, L_e, L = example_loss(model, q_ids, p_ids, s, e, cfg, events)
                grads = ad.backward(L, tape, params)
                if total is None:
                    total = grads
                else:
                    for name in total:
                        total[name] = total[name] + grads[name]
                sums[0] += float(L_s.data)
                sums[1] += float(L_e.data)
                sums[2] += float(L.data)
            b = len(batch)
            adam_step(params, {k: g / b for k, g in total.items()}, state, cfg)
            step += 1
            row = {"step": step, "epoch": epoch, "L_s": sums[0] / b, "L_e": sums[1] / b,
                   "L": sums[2] / b, "wall_ms": (time.perf_counter() - t0) * 1000.0}
            rows.append(row)
            if on_step is not None:
                on_step(row)
        log.info("epoch %d done: last loss %.4f", epoch, rows[-1]["L"] if rows else float("nan"))
        if on_epoch is not None and on_epoch(epoch, rows):
            break
    if events:
        log.warning("%d probabilities fell below the log floor during training", len(events))
    return TrainResult(params, rows, len(events))


def dataset_loss(model: SpanModel, data: Sequence, cfg: TrainConfig) -> float:
    """Mean objective over ``data`` without recording gradients."""
    total = 0.0
    for ex in data:
        q_ids, p_ids = model.ids(ex)
        s, e = ex.gold_spans[0]
        total += float(example_loss(model, q_ids, p_ids, s, e, cfg)[2].data)
    return total / len(data)


# ---------------------------------------------------------------- gradient probe

@dataclass
class ProbeReport:
    grad: np.ndarray
    probs_before: np.ndarray
    probs_after: np.ndarray
    truth_increased: bool
    others_decreased: bool
    violations: list[tuple[int, ...]]
    unsampled_grad_max: float

    @property
    def ok(self) -> bool:
        return self.truth_increased and self.others_decreased and self.unsampled_grad_max == 0.0


def gradient_direction_probe(logits, truth_cell, lr: float = 0.1, norm_mode: str = "joint-flat",
                             context: tuple | None = None) -> ProbeReport:
    """One plain gradient-descent step on the sampled cross-entropy, observed on the logits.

    ``logits`` is the k x k sampled block (or a 1-D vector). With ``context``
    given as ``(full_logits, rows, cols_per_row)`` the sampled block is read
    out of the larger matrix and the gradient on every unsampled cell is
    reported too.
    """
    if context is not None:
        full_np, rows, cols = context
        full = Tensor(np.array(full_np, dtype=np.float64), requires_grad=True)
    else:
        full = Tensor(np.array(np.asarray(getattr(logits, "data", logits)), dtype=np.float64),
                      requires_grad=True)
    truth_cell = tuple(np.atleast_1d(truth_cell).tolist())

    def forward(src: Tensor):
        if context is None:
            block = src
        else:
            block = ad.stack_rows([ad.gather(ad.reshape(ad.gather(src, [r], 0), (src.shape[1],)), c)
                                   for r, c in zip(rows, cols)])
        if block.data.ndim == 1:
            probs = ad.masked_softmax(block)
        else:
            probs = _normalize(block, norm_mode)
        return probs, ad.neg_log_at(probs, truth_cell)

    with Tape() as tape:
        probs, loss = forward(full)
    grad = ad.backward(loss, tape)[id(full)]
    before = probs.data.copy()
    after = forward(Tensor(full.data - lr * grad))[0].data
    truth_up = bool(after[truth_cell] > before[truth_cell])
    others = np.ones(before.shape, dtype=bool)
    others[truth_cell] = False
    if before.ndim == 2 and norm_mode == "row-wise":
        # other rows are normalized on their own and receive no gradient
        row_mask = np.zeros(before.shape, dtype=bool)
        row_mask[truth_cell[0]] = True
        others &= row_mask
    violations = [tuple(int(x) for x in idx) for idx in zip(*np.nonzero(others & (after >= before)))]
    if context is None:
        unsampled = 0.0
    else:
        sampled = np.zeros(full.shape, dtype=bool)
        for r, c in zip(rows, cols):
            sampled[r, c] = True
        unsampled = float(np.abs(grad[~sampled]).max()) if (~sampled).any() else 0.0
    block_grad = grad if context is None else np.stack([grad[r, c] for r, c in zip(rows, cols)])
    return ProbeReport(block_grad, before, after, truth_up, not violations, violations, unsampled)
