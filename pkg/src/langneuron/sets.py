"""Shared / exclusive partitions of per-language neuron sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .neurons import NeuronSet, total_neurons

# mode names as accepted by --mode
COMPLEMENT = "eq3"
STRICT_UNIQUE = "unique"


@dataclass(frozen=True)
class LanguageNeuronProfile:
    languages: dict[str, NeuronSet]
    shared: NeuronSet
    exclusive: dict[str, NeuronSet]
    mode: str = COMPLEMENT

    @property
    def related(self) -> NeuronSet:
        """Union of every language's set."""
        out = NeuronSet()
        for s in self.languages.values():
            out = out | s
        return out

    @property
    def all_exclusive(self) -> NeuronSet:
        out = NeuronSet()
        for s in self.exclusive.values():
            out = out | s
        return out


def classify(per_language: Mapping[str, NeuronSet], mode: str = COMPLEMENT) -> LanguageNeuronProfile:
    """Split language sets into the all-language intersection and the rest.

    ``eq3``: exclusive[l] = lang[l] minus shared.
    ``unique``: exclusive[l] = neurons of lang[l] found in no other language.
    """
    if len(per_language) < 2:
        raise ValueError("classification needs at least two languages")
    if mode not in (COMPLEMENT, STRICT_UNIQUE):
        raise ValueError(f"unknown classification mode {mode!r}")
    langs = {tag: per_language[tag] for tag in sorted(per_language)}
    sets = list(langs.values())
    shared = sets[0]
    for s in sets[1:]:
        shared = shared & s
    exclusive = {}
    for tag, s in langs.items():
        if mode == COMPLEMENT:
            exclusive[tag] = s - shared
        else:
            others = NeuronSet()
            for other_tag, o in langs.items():
                if other_tag != tag:
                    others = others | o
            exclusive[tag] = s - others
    return LanguageNeuronProfile(languages=langs, shared=shared, exclusive=exclusive, mode=mode)


def shared_ratio(profile: LanguageNeuronProfile) -> float | None:
    """|shared| over the mean exclusive size; ``None`` when every exclusive set is empty."""
    sizes = [len(s) for s in profile.exclusive.values()]
    mean = sum(sizes) / len(sizes)
    if mean == 0:
        return None
    return len(profile.shared) / mean


def neuron_fraction(neurons: NeuronSet, config) -> float:
    return len(neurons) / total_neurons(config)


def fmt(value) -> str:
    """Shortest round-tripping text for a metric; ``undefined`` for None."""
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def profile_report(profile: LanguageNeuronProfile, config) -> str:
    lines = [
        "# language neuron profile",
        f"mode\t{profile.mode}",
        f"languages\t{','.join(profile.languages)}",
        f"total_neurons\t{total_neurons(config)}",
        f"shared_size\t{len(profile.shared)}",
        f"shared_fraction\t{fmt(neuron_fraction(profile.shared, config))}",
        f"shared_ratio\t{fmt(shared_ratio(profile))}",
        "",
        "language\trelated\texclusive\trelated_fraction\texclusive_fraction",
    ]
    for tag, s in profile.languages.items():
        ex = profile.exclusive[tag]
        lines.append(
            f"{tag}\t{len(s)}\t{len(ex)}\t{fmt(neuron_fraction(s, config))}\t{fmt(neuron_fraction(ex, config))}"
        )
    return "\n".join(lines) + "\n"
