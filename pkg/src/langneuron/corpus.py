"""Language-tagged corpora: byte tokenizer, file sampling, synthetic languages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import BOS, EOS


def tokenize(data: bytes, max_len: int | None = None) -> np.ndarray:
    """Bytes -> [BOS, *bytes, EOS], cut to ``max_len`` tokens."""
    ids = np.empty(len(data) + 2, dtype=np.int64)
    ids[0] = BOS
    ids[1:-1] = np.frombuffer(data, dtype=np.uint8)
    ids[-1] = EOS
    if max_len is not None:
        ids = ids[:max_len]
    return ids


def detokenize(ids) -> bytes:
    return bytes(int(t) for t in ids if t < 256)


@dataclass
class LanguageCorpus:
    language: str
    sentences: list[np.ndarray]
    source: str = ""
    seed: int | None = None
    shortfall: bool = False

    def __post_init__(self):
        if not self.language:
            raise ValueError("language tag must be non-empty")

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def _reservoir(count_iter, n: int, rng) -> list[int]:
    picked: list[int] = []
    for i in count_iter:
        if i < n:
            picked.append(i)
        else:
            j = int(rng.integers(0, i + 1))
            if j < n:
                picked[j] = i
    return sorted(picked)


def load_corpus(path, language: str, n: int, seed: int, max_len: int) -> LanguageCorpus:
    """Reservoir-sample ``n`` non-empty lines of a UTF-8 text file.

    Kept lines stay in file order. If fewer than ``n`` usable lines exist,
    all of them are returned and ``shortfall`` is set.
    """
    if max_len < 2:
        raise ValueError("max_len must allow at least BOS plus one token")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ValueError(f"cannot read corpus file {path}: {exc}") from exc
    lines = []
    for line in raw.split(b"\n"):
        if line.endswith(b"\r"):
            line = line[:-1]
        if not line:
            continue
        line.decode("utf-8")  # reject non-UTF-8 input early
        lines.append(line)
    rng = np.random.default_rng(seed)
    picked = _reservoir(range(len(lines)), n, rng)
    sentences = [tokenize(lines[i], max_len) for i in picked]
    return LanguageCorpus(
        language=language,
        sentences=sentences,
        source=str(path),
        seed=seed,
        shortfall=len(lines) < n,
    )


@dataclass(frozen=True)
class SynthSpec:
    """A toy language: uniform lengths in [min_len, max_len] bytes from ``alphabet``.

    ``zipf`` > 0 skews symbol frequencies by rank; ``markov`` > 0 adds a
    per-language preferred successor for every symbol, chosen with that
    probability.
    """

    alphabet: bytes
    min_len: int = 4
    max_len: int = 16
    seed: int = 0
    zipf: float = 0.0
    markov: float = 0.0
    language: str = "synth"

    def __post_init__(self):
        if not self.alphabet:
            raise ValueError("alphabet must be non-empty")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


def synth_language(spec: SynthSpec, n: int, max_len: int | None = None) -> LanguageCorpus:
    rng = np.random.default_rng(spec.seed)
    symbols = np.frombuffer(bytes(spec.alphabet), dtype=np.uint8)
    ranks = np.arange(1, symbols.size + 1, dtype=np.float64)
    probs = ranks ** -spec.zipf
    probs /= probs.sum()
    successor = rng.permutation(symbols.size)
    sentences = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        draws = rng.choice(symbols.size, size=length, p=probs)
        if spec.markov > 0:
            follow = rng.random(length) < spec.markov
            for i in range(1, length):
                if follow[i]:
                    draws[i] = successor[draws[i - 1]]
        sentences.append(tokenize(symbols[draws].tobytes(), max_len))
    return LanguageCorpus(language=spec.language, sentences=sentences, source="synthetic", seed=spec.seed)
