"""Exact match and macro-averaged token F1 with answer-length bins."""

from __future__ import annotations

import csv
import json
import re
import string
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


class EvaluationError(ValueError):
    pass


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, gold_texts: Sequence[str]) -> int:
    if not gold_texts:
        raise EvaluationError("gold_texts is empty")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in gold_texts))


def _f1_single(prediction: str, gold: str) -> float:
    p = normalize_answer(prediction).split()
    g = normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    common = Counter(p) & Counter(g)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(p)
    recall = same / len(g)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str, gold_texts: Sequence[str]) -> float:
    if not gold_texts:
        raise EvaluationError("gold_texts is empty")
    return max(_f1_single(prediction, g) for g in gold_texts)


@dataclass
class LengthBin:
    length: int
    em: float
    f1: float
    count: int


@dataclass
class EvalReport:
    em: float
    f1: float
    count: int
    bins: list[LengthBin] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_length_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["answer_length", "em", "f1", "count"])
            for b in self.bins:
                writer.writerow([b.length, f"{b.em:.4f}", f"{b.f1:.4f}", b.count])


def evaluate(predictions: Mapping, data: Sequence, bins: Sequence[int] | None = None) -> EvalReport:
    """Score span predictions against the examples they refer to.

    ``predictions`` maps example id to an object with ``s`` and ``e`` (or a
    ``(s, e)`` pair). Bins are keyed by the shortest gold answer's token
    length; values above the last edge in ``bins`` share one bin.
    """
    if not predictions:
        raise EvaluationError("no predictions to evaluate")
    by_id = {ex.id: ex for ex in data}
    unknown = [k for k in predictions if k not in by_id]
    if unknown:
        raise EvaluationError(f"prediction for unknown example id {unknown[0]!r}")
    em_sum = f1_sum = 0.0
    per_bin: dict[int, list[float]] = {}
    for ex_id, pred in predictions.items():
        ex = by_id[ex_id]
        s, e = (pred.s, pred.e) if hasattr(pred, "s") else pred
        text = ex.span_text(s, e)
        em = exact_match(text, ex.gold_texts)
        f1 = f1_score(text, ex.gold_texts)
        em_sum += em
        f1_sum += f1
        length = min(ge - gs + 1 for gs, ge in ex.gold_spans)
        if bins:
            length = min(length, bins[-1])
        acc = per_bin.setdefault(length, [0.0, 0.0, 0])
        acc[0] += em
        acc[1] += f1
        acc[2] += 1
    count = len(predictions)
    report_bins = [LengthBin(k, 100.0 * v[0] / v[2], 100.0 * v[1] / v[2], int(v[2]))
                   for k, v in sorted(per_bin.items())]
    return EvalReport(100.0 * em_sum / count, 100.0 * f1_sum / count, count, report_bins)


def span_text_agreement(examples: Sequence) -> float:
    """Fraction of gold spans whose extracted text normalizes to the gold answer."""
    total = agree = 0
    for ex in examples:
        for (s, e), text in zip(ex.gold_spans, ex.gold_texts):
            total += 1
            agree += normalize_answer(ex.span_text(s, e)) == normalize_answer(text)
    if not total:
        raise EvaluationError("no gold spans to audit")
    return agree / total
