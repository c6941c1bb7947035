"""Datasets: synthetic needle task, SQuAD 1.1 ingestion, JSONL records."""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    """Input file does not follow the expected schema."""


@dataclass
class QAExample:
    id: str
    passage_tokens: list[str]
    question_tokens: list[str]
    gold_spans: list[tuple[int, int]]
    gold_texts: list[str] = field(default_factory=list)
    # source text and per-token character offsets, when tokens came from raw text
    context: str | None = None
    offsets: list[tuple[int, int]] | None = None

    def __post_init__(self):
        if not self.gold_spans:
            raise ValueError(f"example {self.id}: no gold span")
        self.gold_spans = [(int(s), int(e)) for s, e in self.gold_spans]
        n = len(self.passage_tokens)
        for s, e in self.gold_spans:
            if not 0 <= s <= e < n:
                raise ValueError(f"example {self.id}: span ({s}, {e}) outside passage of length {n}")
        if self.offsets is not None and len(self.offsets) != n:
            raise ValueError(f"example {self.id}: {len(self.offsets)} offsets for {n} tokens")
        if not self.gold_texts:
            self.gold_texts = [self.span_text(s, e) for s, e in self.gold_spans]
        if len(self.gold_texts) != len(self.gold_spans):
            raise ValueError(f"example {self.id}: gold texts and spans differ in count")

    def span_text(self, s: int, e: int) -> str:
        """Answer text for a token span: a slice of the source text when known."""
        if self.context is not None and self.offsets is not None:
            return self.context[self.offsets[s][0]:self.offsets[e][1]]
        return " ".join(self.passage_tokens[s:e + 1])

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "passage": self.passage_tokens,
            "question": self.question_tokens,
            "answers": [{"start": s, "end": e, "text": t}
                        for (s, e), t in zip(self.gold_spans, self.gold_texts)],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QAExample":
        try:
            answers = rec["answers"]
            return cls(str(rec["id"]), list(rec["passage"]), list(rec["question"]),
                       [(a["start"], a["end"]) for a in answers], [a["text"] for a in answers])
        except KeyError as exc:
            raise SchemaError(f"record missing field {exc}") from exc


# ---------------------------------------------------------------- needle task

def generate_needle_task(num_examples: int, passage_len: tuple[int, int] = (20, 40),
                         needle_len: tuple[int, int] = (1, 5), vocab_size: int = 50,
                         seed: int = 0, id_prefix: str = "needle") -> list[QAExample]:
    """Passages of random tokens with a unique planted needle; the question is the needle.

    Lengths are drawn uniformly from the inclusive ranges. Tokens are named
    ``t0 .. t{vocab_size-1}``.
    """
    p_lo, p_hi = passage_len
    n_lo, n_hi = needle_len
    if num_examples < 0:
        raise ValueError("num_examples must be >= 0")
    if vocab_size <= 2:
        raise ValueError("vocab_size must be > 2")
    if not (1 <= n_lo <= n_hi and 1 <= p_lo <= p_hi and n_hi <= p_lo):
        raise ValueError(f"infeasible ranges passage_len={passage_len}, needle_len={needle_len}")
    if n_lo == 1 and vocab_size < 2:
        raise ValueError("vocabulary too small for a unique single-token needle")
    rng = np.random.default_rng(seed)
    out = []
    for idx in range(num_examples):
        n = int(rng.integers(p_lo, p_hi + 1))
        L = int(rng.integers(n_lo, n_hi + 1))
        needle = rng.integers(0, vocab_size, size=L)
        start = int(rng.integers(0, n - L + 1))
        for _ in range(1000):
            passage = rng.integers(0, vocab_size, size=n)
            passage[start:start + L] = needle
            if count_occurrences(passage.tolist(), needle.tolist()) == 1:
                break
        else:
            raise ValueError("could not place a unique needle; vocabulary too small")
        toks = [f"t{i}" for i in passage]
        q = [f"t{i}" for i in needle]
        out.append(QAExample(f"{id_prefix}-{idx}", toks, q, [(start, start + L - 1)]))
    return out


def count_occurrences(seq: Sequence, sub: Sequence) -> int:
    L = len(sub)
    return sum(1 for i in range(len(seq) - L + 1) if list(seq[i:i + L]) == list(sub))


def write_jsonl(examples: Iterable[QAExample], path) -> int:
    count = 0
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record()) + "\n")
            count += 1
    return count


def read_jsonl(path) -> list[QAExample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc.msg}") from exc
            out.append(QAExample.from_record(rec))
    return out


# ---------------------------------------------------------------- SQuAD 1.1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[tuple[str, int, int]]:
    """Whitespace plus punctuation split; returns (token, char_start, char_end)."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


@dataclass
class SquadLoadReport:
    raw_questions: int
    raw_answers: int
    kept: int
    dropped: int
    aligned_answers: int = 0

    @property
    def alignment_rate(self) -> float:
        """Share of questions with at least one token-aligned answer."""
        return self.kept / self.raw_questions if self.raw_questions else 0.0

    @property
    def answer_alignment_rate(self) -> float:
        return self.aligned_answers / self.raw_answers if self.raw_answers else 0.0


def _align(offsets: list[tuple[str, int, int]], start: int, end: int) -> tuple[int, int] | None:
    s_tok = next((i for i, (_, a, _) in enumerate(offsets) if a == start), None)
    e_tok = next((i for i, (_, _, b) in enumerate(offsets) if b == end), None)
    if s_tok is None or e_tok is None or e_tok < s_tok:
        return None
    return s_tok, e_tok


def load_squad(path, report: list | None = None) -> list[QAExample]:
    """Read SQuAD 1.1 JSON; map character answer offsets onto token spans.

    Answers whose boundaries do not fall on token boundaries are dropped; a
    question is kept when at least one of its answers aligns. A
    :class:`SquadLoadReport` is appended to ``report`` if given.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "data" not in doc:
        raise SchemaError(f"{path}: top-level 'data' field missing")
    examples: list[QAExample] = []
    raw_q = raw_a = dropped = aligned_a = 0
    for a_idx, article in enumerate(doc["data"]):
        for p_idx, para in enumerate(_field(article, "paragraphs", f"data[{a_idx}]")):
            where = f"data[{a_idx}].paragraphs[{p_idx}]"
            context = _field(para, "context", where)
            offsets = tokenize(context)
            tokens = [t for t, _, _ in offsets]
            char_spans = [(a, b) for _, a, b in offsets]
            for qa in _field(para, "qas", where):
                raw_q += 1
                qid = str(_field(qa, "id", where + ".qas"))
                question = _field(qa, "question", where + f".qas[{qid}]")
                spans, texts = [], []
                for ans in _field(qa, "answers", where + f".qas[{qid}]"):
                    raw_a += 1
                    text = _field(ans, "text", f"answer of {qid}")
                    start = int(_field(ans, "answer_start", f"answer of {qid}"))
                    # surrounding whitespace in the answer text does not move the span
                    start += len(text) - len(text.lstrip())
                    span = _align(offsets, start, start + len(text.strip()))
                    if span is not None:
                        aligned_a += 1
                        spans.append(span)
                        texts.append(text)
                if not spans:
                    dropped += 1
                    continue
                examples.append(QAExample(qid, tokens, [t for t, _, _ in tokenize(question)],
                                          spans, texts, context, char_spans))
    if report is not None:
        report.append(SquadLoadReport(raw_q, raw_a, len(examples), dropped, aligned_a))
    return examples


def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field {key!r} in {where}")
    return obj[key]


def detokenize(tokens: Sequence[str]) -> str:
    """Join word tokens, attaching punctuation to the preceding word."""
    out = ""
    for tok in tokens:
        if out and not re.fullmatch(r"[^\w\s]", tok):
            out += " "
        out += tok
    return out
