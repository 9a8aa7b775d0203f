"""Evaluation metrics over token ids.

Rouge-L here is computed on token ids (bytes for the bundled tokenizer),
so scores are only comparable within this package.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import InputError
from .tensor_core import log_softmax

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """LCS-based F-measure scaled to [0, 100]."""
    if len(candidate) == 0 or len(reference) == 0:
        raise InputError("rouge_l needs two nonempty sequences")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    recall = lcs / len(reference)
    precision = lcs / len(candidate)
    return 100.0 * 2 * recall * precision / (recall + precision)


def agreement_rate(seq_a: Sequence, seq_b: Sequence) -> tuple[float, int | None]:
    """Fraction of equal positions over the common prefix length, plus the
    index of the first differing position (None if they agree)."""
    n = min(len(seq_a), len(seq_b))
    if n == 0:
        if len(seq_a) == len(seq_b):
            raise InputError("agreement_rate of two empty sequences")
        return 0.0, 0
    same = [seq_a[i] == seq_b[i] for i in range(n)]
    first = next((i for i, s in enumerate(same) if not s), None)
    return sum(same) / n, first


def corpus_perplexity(model, tokens: Sequence[int], chunk: int | None = None) -> float:
    """Teacher-forced perplexity of ``tokens``.

    ``model`` only needs a ``logits(tokens) -> [n, V]`` method. Streams
    longer than ``chunk`` (default: the model's ``max_seq_len``) are scored
    in consecutive chunks; the first token of every chunk is context only.
    """
    tokens = [int(t) for t in tokens]
    if len(tokens) < 2:
        raise InputError("perplexity needs at least two tokens")
    if chunk is None:
        chunk = getattr(getattr(model, "config", None), "max_seq_len", len(tokens))
    nll, count, floored = 0.0, 0, False
    for start in range(0, len(tokens) - 1, chunk - 1):
        piece = tokens[start:start + chunk]
        if len(piece) < 2:
            break
        logp = log_softmax(model.logits(piece))
        targets = np.asarray(piece[1:])
        lp = logp[np.arange(len(piece) - 1), targets]
        if np.any(lp < math.log(PROB_FLOOR)):
            floored = True
            lp = np.maximum(lp, math.log(PROB_FLOOR))
        nll -= float(lp.sum())
        count += len(piece) - 1
    if floored:
        log.warning("some target probabilities were below %g and were floored", PROB_FLOOR)
    return math.exp(nll / count)


@dataclass
class EvalReport:
    effective_bits_final: float
    effective_bits_mean: float
    rouge_l: float
    agreement_rate: float
    perplexity: float
    bytes_per_token_mean: float

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())


def evaluate(trace, generated: Sequence[int], reference: Sequence[int], model, corpus_tokens: Sequence[int]) -> EvalReport:
    """Summarise one generation against a reference continuation.

    Perplexity is measured on ``corpus_tokens`` with the model in whatever
    precision state it is in (after :func:`generate`, its final state).
    """
    records = list(trace)
    if not records:
        raise InputError("empty trace")
    return EvalReport(
        effective_bits_final=model.effective_bits(),
        effective_bits_mean=float(np.mean([r.effective_bits for r in records])),
        rouge_l=rouge_l(generated, reference),
        agreement_rate=agreement_rate(generated, reference)[0],
        perplexity=corpus_perplexity(model, corpus_tokens),
        bytes_per_token_mean=float(np.mean([r.weight_bytes_touched for r in records])),
    )
