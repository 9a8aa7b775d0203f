"""Byte-level tokenizer and the bundled desk-scale text corpus."""

from __future__ import annotations

from importlib import resources

VOCAB_SIZE = 256


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(tokens) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


def corpus_text() -> str:
    return resources.files("flexquant").joinpath("data/corpus.txt").read_text(encoding="utf-8")


def corpus_tokens() -> list[int]:
    return encode(corpus_text())


def corpus_prompts(n: int = 20, length: int = 32) -> list[list[int]]:
    """``n`` evenly spaced, non-overlapping-where-possible slices of the corpus."""
    toks = corpus_tokens()
    if length > len(toks):
        raise ValueError("prompt length exceeds corpus size")
    stride = max(1, (len(toks) - length) // max(1, n - 1)) if n > 1 else 0
    return [toks[i * stride:i * stride + length] for i in range(n)]
