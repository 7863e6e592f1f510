"""Neuron addressing, neuron sets, and their lowering to column masks."""

from __future__ import annotations

import enum
from typing import Iterable, Iterator, NamedTuple

import numpy as np


class Site(enum.IntEnum):
    """Where a neuron lives. The integer value fixes the total order."""

    FFN_INTER = 0
    ATTN_Q = 1
    ATTN_K = 2
    ATTN_V = 3

    @property
    def tag(self) -> str:
        return _SITE_TAGS[self]

    @classmethod
    def from_tag(cls, tag: str) -> "Site":
        try:
            return _TAG_SITES[tag]
        except KeyError:
            raise ValueError(f"unknown neuron site {tag!r}") from None


_SITE_TAGS = {
    Site.FFN_INTER: "FfnInter",
    Site.ATTN_Q: "AttnQ",
    Site.ATTN_K: "AttnK",
    Site.ATTN_V: "AttnV",
}
_TAG_SITES = {v: k for k, v in _SITE_TAGS.items()}

ATTN_SITES = (Site.ATTN_Q, Site.ATTN_K, Site.ATTN_V)


class NeuronId(NamedTuple):
    """One ablatable row/column. Tuple comparison gives the (layer, site, head, index) order."""

    layer: int
    site: Site
    head: int
    index: int

    def __str__(self) -> str:
        return f"{self.layer} {self.site.tag} {self.head} {self.index}"

    @classmethod
    def parse(cls, text: str) -> "NeuronId":
        parts = text.split()
        if len(parts) != 4:
            raise ValueError(f"malformed neuron line {text!r}")
        return cls(int(parts[0]), Site.from_tag(parts[1]), int(parts[2]), int(parts[3]))


def site_width(config, site: Site) -> int:
    """Number of neurons at one site of one layer."""
    if site == Site.FFN_INTER:
        return config.d_inter
    return config.n_heads * config.d_head


def column_of(config, neuron: NeuronId) -> int:
    """Column index of the neuron inside its owning weight matrix."""
    if neuron.site == Site.FFN_INTER:
        return neuron.index
    return neuron.head * config.d_head + neuron.index


def neuron_at(config, layer: int, site: Site, column: int) -> NeuronId:
    if site == Site.FFN_INTER:
        return NeuronId(layer, site, 0, int(column))
    head, index = divmod(int(column), config.d_head)
    return NeuronId(layer, site, head, index)


def check_neuron(config, neuron: NeuronId) -> None:
    layer, site, head, index = neuron
    if not 0 <= layer < config.n_layers:
        raise ValueError(f"{neuron}: layer out of range (n_layers={config.n_layers})")
    if site == Site.FFN_INTER:
        ok = head == 0 and 0 <= index < config.d_inter
    else:
        ok = 0 <= head < config.n_heads and 0 <= index < config.d_head
    if not ok:
        raise ValueError(f"{neuron}: head/index out of range for this config")


def total_neurons(config) -> int:
    return config.n_layers * (config.d_inter + 3 * config.n_heads * config.d_head)


def all_neurons(config) -> "NeuronSet":
    ids = []
    for layer in range(config.n_layers):
        for site in Site:
            ids.extend(neuron_at(config, layer, site, c) for c in range(site_width(config, site)))
    return NeuronSet(ids)


class NeuronSet:
    """Sorted, duplicate-free, immutable collection of NeuronId."""

    __slots__ = ("_ids", "_lookup")

    def __init__(self, ids: Iterable[NeuronId] = ()):
        ids = [n if isinstance(n, NeuronId) else NeuronId(n[0], Site(n[1]), n[2], n[3]) for n in ids]
        self._ids = tuple(sorted(set(ids)))
        self._lookup = frozenset(self._ids)

    def __iter__(self) -> Iterator[NeuronId]:
        return iter(self._ids)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, item) -> bool:
        return item in self._lookup

    def __getitem__(self, i):
        return self._ids[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, NeuronSet):
            return NotImplemented
        return self._ids == other._ids

    def __hash__(self) -> int:
        return hash(self._ids)

    def __repr__(self) -> str:
        return f"NeuronSet({len(self)} neurons)"

    def __or__(self, other: "NeuronSet") -> "NeuronSet":
        return NeuronSet(self._lookup | other._lookup)

    def __and__(self, other: "NeuronSet") -> "NeuronSet":
        return NeuronSet(self._lookup & other._lookup)

    def __sub__(self, other: "NeuronSet") -> "NeuronSet":
        return NeuronSet(self._lookup - other._lookup)

    def issubset(self, other: "NeuronSet") -> bool:
        return self._lookup <= other._lookup

    # -- serialization ------------------------------------------------------

    def dumps(self, config_hash: str, seed: int | None = None) -> str:
        header = f"# neuronset config={config_hash}"
        if seed is not None:
            header += f" seed={seed}"
        header += f" count={len(self)}"
        return "\n".join([header, *map(str, self._ids)]) + "\n"

    def save(self, path, config_hash: str, seed: int | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps(config_hash, seed))

    @classmethod
    def loads(cls, text: str) -> tuple["NeuronSet", dict]:
        """Parse serialized text; returns the set and the header fields."""
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# neuronset"):
            raise ValueError("missing neuronset header line")
        header = dict(tok.split("=", 1) for tok in lines[0].split()[2:] if "=" in tok)
        ids = [NeuronId.parse(line) for line in lines[1:] if line.strip()]
        out = cls(ids)
        if "count" in header and int(header["count"]) != len(out):
            raise ValueError("neuronset count does not match its body")
        return out, header

    @classmethod
    def load(cls, path) -> tuple["NeuronSet", dict]:
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


class AblationMask:
    """A NeuronSet lowered to boolean column selectors per (layer, site).

    Attention selectors are laid out head-major, so entry ``head * d_head +
    index`` is the column of W_Q / W_K / W_V owned by that neuron.
    """

    def __init__(self, config, columns: dict[tuple[int, Site], np.ndarray] | None = None):
        self.config = config
        self.columns = {k: v for k, v in (columns or {}).items() if v.any()}

    @classmethod
    def from_neurons(cls, neurons: Iterable[NeuronId], config) -> "AblationMask":
        columns: dict[tuple[int, Site], np.ndarray] = {}
        for n in neurons:
            check_neuron(config, n)
            key = (n.layer, Site(n.site))
            if key not in columns:
                columns[key] = np.zeros(site_width(config, key[1]), dtype=bool)
            columns[key][column_of(config, n)] = True
        return cls(config, columns)

    def to_neurons(self) -> NeuronSet:
        ids = []
        for (layer, site), sel in self.columns.items():
            ids.extend(neuron_at(self.config, layer, site, c) for c in np.flatnonzero(sel))
        return NeuronSet(ids)

    def __bool__(self) -> bool:
        return bool(self.columns)

    def __len__(self) -> int:
        return int(sum(int(v.sum()) for v in self.columns.values()))
