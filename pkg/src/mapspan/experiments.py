"""Needle-task experiments and benchmarks shared by the CLI and the test suite."""

from __future__ import annotations

import csv
import logging
import os
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .autodiff import ParameterSet, Tensor
from .data import generate_needle_task
from .encoder import EncoderConfig, EncoderOutput, Vocabulary
from .heads import MapParams, init_map, map_first, map_full_matrix
from .inference import SearchConfig, predict
from .metrics import evaluate
from .model import ModelConfig, SpanModel
from .trainer import TrainConfig, build_sampled_matrix, dataset_loss, sampled_cell_count, train

log = logging.getLogger(__name__)

THREADS_ENV = "MAP_SPAN_THREADS"

# Encoder and optimizer settings that learn the needle task within budget.
NEEDLE_ENCODER = {"pack": "qpq", "match": True}
NEEDLE_TRAIN = {"learning_rate": 3e-3, "batch_size": 8}


def worker_count(requested: int | None = None) -> int:
    """Worker threads for evaluation, capped by ``MAP_SPAN_THREADS`` when set."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


def needle_splits(num_train: int = 2000, num_dev: int = 500, seed: int = 0, **kw):
    """Train and dev splits drawn from disjoint seeds."""
    tr = generate_needle_task(num_train, seed=2 * seed + 1, id_prefix="train", **kw)
    dev = generate_needle_task(num_dev, seed=2 * seed + 2, id_prefix="dev", **kw)
    return tr, dev


def build_model(head: str, data, d: int = 32, directions: str = "forward", seed: int = 0,
                vocab: Vocabulary | None = None, **encoder_kw) -> SpanModel:
    vocab = vocab or Vocabulary.build(data)
    enc = EncoderConfig(vocab_size=len(vocab), d=d, embed=encoder_kw.pop("embed", d), seed=seed,
                        **encoder_kw)
    return SpanModel.create(ModelConfig(head=head, encoder=enc, directions=directions), vocab)


def predict_all(model: SpanModel, data, strategy: str, cfg: SearchConfig = SearchConfig(),
                threads: int | None = None) -> dict:
    """Predictions keyed by example id; order-independent, so threads are safe."""
    workers = worker_count(threads)
    if workers == 1 or len(data) < 2:
        return {ex.id: predict(model, ex, strategy, cfg) for ex in data}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        preds = list(pool.map(lambda ex: predict(model, ex, strategy, cfg), data))
    return {ex.id: p for ex, p in zip(data, preds)}


def train_until(model: SpanModel, train_data, dev_data, cfg: TrainConfig, strategy: str,
                eval_every: int = 1, target_em: float | None = None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs, scoring dev every ``eval_every`` epochs.

    Stops early once ``target_em`` is reached. Returns one row per evaluation.
    """
    history = []
    t0 = time.perf_counter()

    def on_epoch(epoch: int, rows: list[dict]) -> bool:
        done = epoch + 1
        if done % eval_every and done != cfg.epochs:
            return False
        rep = evaluate(predict_all(model, dev_data, strategy), dev_data)
        history.append({"epoch": done, "step": len(rows), "loss": float(np.mean([r["L"] for r in rows[-20:]])),
                        "em": rep.em, "f1": rep.f1, "elapsed_s": time.perf_counter() - t0})
        log.info("epoch %d: loss %.4f dev EM %.2f F1 %.2f", done, history[-1]["loss"], rep.em, rep.f1)
        return target_em is not None and rep.em >= target_em

    train(model, train_data, cfg, on_epoch=on_epoch)
    return history


# ---------------------------------------------------------------- benchmarks

def _random_instance(n: int, d: int, rng) -> tuple[EncoderOutput, MapParams]:
    enc = EncoderOutput(Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(4, d))))
    return enc, MapParams.from_params(init_map(d, rng, "forward"))


def _best_ms(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def bench_cells(ns: Sequence[int] = (64, 128, 256, 512), k: int = 20, d: int = 32,
                repeats: int = 3, seed: int = 0, max_full: int = 1024) -> list[dict]:
    """Cell counts and construction wall time, full matrix vs sampled slice."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in ns:
        enc, mp = _random_instance(n, d, rng)
        truth = (int(rng.integers(n)), int(rng.integers(n)))
        cfg = TrainConfig(sample_k=k)

        def sampled():
            build_sampled_matrix(enc, mp, map_first(enc, mp), *truth, cfg)

        row = {"n": n, "k": k, "full_cells": n * n, "sampled_cells": sampled_cell_count(n, k),
               "sampled_ms": _best_ms(sampled, repeats), "full_ms": "", "note": ""}
        if n > max_full:
            row["note"] = f"full construction skipped: n > {max_full}"
        else:
            row["full_ms"] = _best_ms(lambda: map_full_matrix(enc, mp, max_n=max_full), repeats)
        rows.append(row)
    return rows


def bench_k_sweep(ks: Sequence[int] = (5, 10, 20, 30), num_train: int = 2000, num_dev: int = 500,
                  epochs: int = 3, seed: int = 0, d: int = 32) -> list[dict]:
    """Dev EM/F1 of forward matrix-head training for each sample size k."""
    tr, dev = needle_splits(num_train, num_dev, seed)
    rows = []
    for k in ks:
        model = build_model("map", tr, d=d, seed=seed, **NEEDLE_ENCODER)
        cfg = TrainConfig(sample_k=k, epochs=epochs, seed=seed, **NEEDLE_TRAIN)
        t0 = time.perf_counter()
        res = train(model, tr, cfg)
        rep = evaluate(predict_all(model, dev, "map-forward"), dev)
        rows.append({"k": k, "em": rep.em, "f1": rep.f1, "steps": len(res.log),
                     "train_s": time.perf_counter() - t0})
    return rows


def convergence(num_train: int = 400, full_epochs: int = 4, k: int = 20, seed: int = 0, d: int = 32,
                passage_len: tuple[int, int] = (20, 40), norm_mode: str = "joint-flat") -> dict:
    """Paired sampled/full training from one initialization.

    The full-matrix run trains ``full_epochs`` epochs; the sampled run gets
    twice as many. After every epoch both models are scored with the same
    full-matrix objective on the training data, since the two training
    losses are normalized over different cell sets and are not comparable.
    """
    tr = generate_needle_task(num_train, passage_len=passage_len, seed=2 * seed + 1, id_prefix="conv")
    if max(len(ex.passage_tokens) for ex in tr) > 64:
        raise ValueError("convergence comparison expects passages of at most 64 tokens")
    base = build_model("map", tr, d=d, seed=seed, **NEEDLE_ENCODER)
    full_eval = TrainConfig(matrix_mode="full")
    runs = {}
    for mode, epochs in (("full", full_epochs), ("sampled", 2 * full_epochs)):
        model = SpanModel(base.cfg, base.params.copy(), base.vocab)
        cfg = TrainConfig(sample_k=k, matrix_mode=mode, norm_mode=norm_mode, seed=seed, **NEEDLE_TRAIN)
        checkpoints = []

        def on_epoch(epoch: int, rows: list[dict], model=model) -> bool:
            checkpoints.append({"epoch": epoch + 1, "step": len(rows),
                                "full_objective": dataset_loss(model, tr, full_eval)})
            return False

        res = train(model, tr, replace(cfg, epochs=epochs), on_epoch=on_epoch)
        curve = res.losses()
        runs[mode] = {"curve": curve, "checkpoints": checkpoints}
    full_final = runs["full"]["checkpoints"][-1]["full_objective"]
    full_steps = runs["full"]["checkpoints"][-1]["step"]
    target = 1.1 * full_final
    reached = next((c["step"] for c in runs["sampled"]["checkpoints"] if c["full_objective"] <= target),
                   None)
    return {"runs": runs, "full_final": full_final, "full_steps": full_steps, "target": target,
            "sampled_steps_to_target": reached,
            "parity": reached is not None and reached <= 2 * full_steps}


def write_rows(rows: Sequence[dict], path, fields: Sequence[str] | None = None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({f: row.get(f, "") for f in fields})


def convergence_rows(result: dict) -> tuple[list[dict], list[dict]]:
    """Per-step aligned loss curves and per-epoch full-objective checkpoints."""
    full, sampled = result["runs"]["full"]["curve"], result["runs"]["sampled"]["curve"]
    curves = [{"step": i + 1, "sampled_L": sampled[i], "full_L": full[i] if i < len(full) else ""}
              for i in range(len(sampled))]
    points = []
    for mode in ("full", "sampled"):
        for c in result["runs"][mode]["checkpoints"]:
            points.append({"mode": mode, **c})
    return curves, points


def scaled_params(ps: ParameterSet, factor: float) -> ParameterSet:
    return ParameterSet({k: t.data * factor for k, t in ps.items()})
