"""Generative evaluation: greedy decoding scored by normalized exact match.

Evaluation always consumes original benchmark questions; instruction-format
inputs are rejected because candidate answers do not exist at inference
time. Global accuracy is the count-weighted mean of the open-ended and
closed-ended accuracies.
"""

from __future__ import annotations

import csv
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, InstructionLeakError
from .model import VLModel
from .tokenizer import ByteTokenizer

_WS = re.compile(r"\s+")
_TERMINAL_PUNCT = ".?!,;:"


def normalize_answer(text: str) -> str:
    """Lowercase, trim, collapse whitespace, strip terminal punctuation."""
    out = _WS.sub(" ", text.strip().lower())
    return out.rstrip(_TERMINAL_PUNCT).strip()


@dataclass
class EvalReport:
    """Exact-match accuracy split by answer type, all percentages."""

    n_open: int
    n_closed: int
    acc_open: float
    acc_closed: float
    acc_global: float

    def table(self) -> str:
        return (f"{'':<10}{'count':>8}{'accuracy':>12}\n"
                f"{'open':<10}{self.n_open:>8}{self.acc_open:>11.2f}%\n"
                f"{'closed':<10}{self.n_closed:>8}{self.acc_closed:>11.2f}%\n"
                f"{'global':<10}{self.n_open + self.n_closed:>8}{self.acc_global:>11.2f}%")

    def write_csv(self, path):
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["n_open", "n_closed", "acc_open", "acc_closed", "acc_global"])
            w.writerow([self.n_open, self.n_closed, f"{self.acc_open:.4f}",
                        f"{self.acc_closed:.4f}", f"{self.acc_global:.4f}"])


def make_report(n_open, n_closed, correct_open, correct_closed) -> EvalReport:
    acc_open = 100.0 * correct_open / n_open if n_open else 0.0
    acc_closed = 100.0 * correct_closed / n_closed if n_closed else 0.0
    total = n_open + n_closed
    acc_global = 100.0 * (correct_open + correct_closed) / total if total else 0.0
    return EvalReport(n_open, n_closed, acc_open, acc_closed, acc_global)


def evaluate(model: VLModel, samples, max_len: int = 24, workers: int = 1,
             tokenizer: ByteTokenizer | None = None) -> EvalReport:
    """Greedy-generate an answer per sample and score exact match.

    ``workers`` fans records out across threads; forward passes are
    read-only and results merge in record order, so the report does not
    depend on the worker count.
    """
    if not samples:
        raise ConfigError("evaluation benchmark is empty")
    for i, s in enumerate(samples):
        if getattr(s, "instruction_format", False):
            raise InstructionLeakError(
                f"sample {i} is instruction-format; evaluate on original questions")
    tok = tokenizer or ByteTokenizer()

    def predict(sample):
        ids = model.generate(sample.image, sample.question_ids, max_len=max_len)
        return tok.decode(ids)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(predict, samples))
    else:
        preds = [predict(s) for s in samples]

    counts = {"open": [0, 0], "closed": [0, 0]}  # [n, correct]
    for sample, pred in zip(samples, preds):
        bucket = counts[sample.answer_type]
        bucket[0] += 1
        if normalize_answer(pred) == normalize_answer(sample.answer_text):
            bucket[1] += 1
    return make_report(counts["open"][0], counts["closed"][0],
                       counts["open"][1], counts["closed"][1])
