"""Perplexity-delta ablations and the shared-vs-exclusive importance metrics."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .model import ModelBundle, perplexity
from .neurons import AblationMask, NeuronSet, all_neurons
from .sets import LanguageNeuronProfile, fmt, shared_ratio


def delta_ppl(model: ModelBundle, corpus, neurons: NeuronSet, base: float | None = None) -> float:
    """PPL with ``neurons`` zeroed minus PPL of the intact model (may be negative)."""
    if base is None:
        base = perplexity(model, corpus)
    if not len(neurons):
        return 0.0
    return perplexity(model, corpus, AblationMask.from_neurons(neurons, model.config)) - base


def importance(d_shared: float, n_shared: int, d_exclusive: float, n_exclusive: int) -> float | None:
    """Per-neuron shared damage over per-neuron exclusive damage; None if undefined."""
    if n_shared <= 0 or n_exclusive <= 0 or d_exclusive == 0:
        return None
    return (d_shared / n_shared) / (d_exclusive / n_exclusive)


def agnostic_score(imps: Mapping[str, float | None]) -> float | None:
    """ln(1 + mean importance); None if any importance is undefined or the mean is <= -1."""
    if not imps:
        raise ValueError("agnostic score needs at least one language")
    values = list(imps.values())
    if any(v is None for v in values):
        return None
    mean = sum(values) / len(values)
    if not mean > -1.0:
        return None
    return math.log1p(mean)


def random_neurons(config, n: int, seed: int, exclude: NeuronSet = NeuronSet()) -> NeuronSet:
    """``n`` detectable neurons drawn uniformly without replacement, avoiding ``exclude``."""
    pool = [nid for nid in all_neurons(config) if nid not in exclude]
    if n < 0 or n > len(pool):
        raise ValueError(f"cannot draw {n} neurons from a pool of {len(pool)}")
    if n == 0:
        return NeuronSet()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=n, replace=False)
    return NeuronSet(pool[i] for i in picks)


def random_control(
    model: ModelBundle,
    corpus,
    n: int,
    seed: int,
    exclude: NeuronSet = NeuronSet(),
    base: float | None = None,
) -> float:
    return delta_ppl(model, corpus, random_neurons(model.config, n, seed, exclude), base)


@dataclass
class LanguageImportance:
    ppl_base: float
    delta_shared: float
    n_shared: int
    delta_exclusive: float
    n_exclusive: int
    imp: float | None

    def consistent(self, tol: float = 1e-9) -> bool:
        expect = importance(self.delta_shared, self.n_shared, self.delta_exclusive, self.n_exclusive)
        if expect is None or self.imp is None:
            return expect is None and self.imp is None
        return abs(expect - self.imp) <= tol * max(1.0, abs(expect))


@dataclass
class ImportanceReport:
    languages: dict[str, LanguageImportance]
    agnostic_score: float | None
    shared_ratio: float | None = None
    n_shared: int = 0
    # (language, set size, seed) -> delta PPL of a random set of that size
    random: dict[tuple[str, int, int], float] = field(default_factory=dict)
    mode: str = "eq3"
    seed: int | None = None

    @property
    def defined(self) -> bool:
        return self.agnostic_score is not None

    def random_median(self, language: str, size: int) -> float | None:
        vals = [v for (lang, n, _), v in self.random.items() if lang == language and n == size]
        return statistics.median(vals) if vals else None

    def consistent(self, tol: float = 1e-9) -> bool:
        """Stored operands reproduce every stored derived value."""
        if not all(row.consistent(tol) for row in self.languages.values()):
            return False
        expect = agnostic_score({k: v.imp for k, v in self.languages.items()})
        if expect is None or self.agnostic_score is None:
            return expect is None and self.agnostic_score is None
        return abs(expect - self.agnostic_score) <= tol * max(1.0, abs(expect))

    # -- text formats ---------------------------------------------------------

    def to_kv(self) -> str:
        lines = [
            f"seed={fmt(self.seed)}",
            f"mode={self.mode}",
            f"agnostic_score={fmt(self.agnostic_score)}",
            f"shared_ratio={fmt(self.shared_ratio)}",
            f"n_shared={self.n_shared}",
        ]
        for tag, row in self.languages.items():
            for name in ("ppl_base", "delta_shared", "n_shared", "delta_exclusive", "n_exclusive", "imp"):
                lines.append(f"lang.{tag}.{name}={fmt(getattr(row, name))}")
        for (tag, size, seed), value in sorted(self.random.items()):
            lines.append(f"random.{tag}.{size}.{seed}={fmt(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "ImportanceReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)

        def num(s):
            return None if s == "undefined" else float(s)

        langs: dict[str, dict] = {}
        random: dict[tuple[str, int, int], float] = {}
        for key, value in kv.items():
            if key.startswith("lang."):
                _, tag, name = key.split(".", 2)
                langs.setdefault(tag, {})[name] = value
            elif key.startswith("random."):
                _, tag, size, seed = key.split(".", 3)
                random[(tag, int(size), int(seed))] = float(value)
        rows = {
            tag: LanguageImportance(
                ppl_base=float(d["ppl_base"]),
                delta_shared=float(d["delta_shared"]),
                n_shared=int(d["n_shared"]),
                delta_exclusive=float(d["delta_exclusive"]),
                n_exclusive=int(d["n_exclusive"]),
                imp=num(d["imp"]),
            )
            for tag, d in langs.items()
        }
        seed = kv.get("seed", "undefined")
        return cls(
            languages=rows,
            agnostic_score=num(kv["agnostic_score"]),
            shared_ratio=num(kv.get("shared_ratio", "undefined")),
            n_shared=int(kv.get("n_shared", 0)),
            random=random,
            mode=kv.get("mode", "eq3"),
            seed=None if seed == "undefined" else int(seed),
        )

    def to_text(self) -> str:
        lines = [
            "# importance report",
            f"agnostic_score\t{fmt(self.agnostic_score)}",
            f"shared_ratio\t{fmt(self.shared_ratio)}",
            f"shared_size\t{self.n_shared}",
            "",
            "language\tppl_base\tdelta_shared\tn_shared\tdelta_exclusive\tn_exclusive\timp"
            "\trandom_median_shared\trandom_median_exclusive",
        ]
        for tag, r in self.languages.items():
            lines.append(
                "\t".join(
                    [
                        tag,
                        fmt(r.ppl_base),
                        fmt(r.delta_shared),
                        str(r.n_shared),
                        fmt(r.delta_exclusive),
                        str(r.n_exclusive),
                        fmt(r.imp),
                        fmt(self.random_median(tag, r.n_shared)),
                        fmt(self.random_median(tag, r.n_exclusive)),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def build_report(
    model: ModelBundle,
    corpora: Mapping[str, object],
    profile: LanguageNeuronProfile,
    random_seeds=range(10),
    seed: int | None = None,
) -> ImportanceReport:
    """Ablate shared, exclusive and size-matched random sets on each language."""
    related = profile.related
    rows = {}
    random: dict[tuple[str, int, int], float] = {}
    for tag in profile.languages:
        corpus = corpora[tag]
        base = perplexity(model, corpus)
        ex = profile.exclusive[tag]
        d_sh = delta_ppl(model, corpus, profile.shared, base)
        d_ex = delta_ppl(model, corpus, ex, base)
        rows[tag] = LanguageImportance(
            ppl_base=base,
            delta_shared=d_sh,
            n_shared=len(profile.shared),
            delta_exclusive=d_ex,
            n_exclusive=len(ex),
            imp=importance(d_sh, len(profile.shared), d_ex, len(ex)),
        )
        for size in sorted({len(profile.shared), len(ex)}):
            if size == 0:
                continue
            for s in random_seeds:
                random[(tag, size, int(s))] = random_control(model, corpus, size, int(s), related, base)
    return ImportanceReport(
        languages=rows,
        agnostic_score=agnostic_score({k: v.imp for k, v in rows.items()}),
        shared_ratio=shared_ratio(profile),
        n_shared=len(profile.shared),
        random=random,
        mode=profile.mode,
        seed=seed,
    )
