"""Per-neuron impact scores and language-related neuron detection.

The parallel path scores every neuron of a (layer, site) from one traced
forward pass. :func:`sequential_oracle` is the brute-force counterpart: it
literally zeroes the neuron's weights and recomputes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import ForwardTrace, ModelBundle, as_tokens, forward, forward_masked
from .neurons import (
    ATTN_SITES,
    AblationMask,
    NeuronId,
    NeuronSet,
    Site,
    check_neuron,
    column_of,
    neuron_at,
    site_width,
)

LAYER_LOCAL = "layer"
FINAL_OUTPUT = "final"


@dataclass(frozen=True)
class DetectionConfig:
    """``criterion`` is ``"topq"`` (threshold = q) or ``"sigma"`` (threshold = σ)."""

    criterion: str = "topq"
    threshold: float = 0.01
    tau: float = 0.9
    scope: str = LAYER_LOCAL

    def __post_init__(self):
        if self.criterion == "topq":
            if not 0.0 <= self.threshold <= 1.0:
                raise ValueError("top-q fraction must lie in [0, 1]")
        elif self.criterion == "sigma":
            if not self.threshold > 0:
                raise ValueError("sigma must be positive")
        else:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.scope not in (LAYER_LOCAL, FINAL_OUTPUT):
            raise ValueError(f"unknown scope {self.scope!r}")

    @classmethod
    def parse_criterion(cls, text: str) -> tuple[str, float]:
        """``"topq:0.01"`` -> ``("topq", 0.01)``."""
        kind, _, value = text.partition(":")
        if kind not in ("topq", "sigma") or not value:
            raise ValueError(f"criterion must look like topq:F or sigma:F, got {text!r}")
        return kind, float(value)

    @property
    def criterion_text(self) -> str:
        return f"{self.criterion}:{self.threshold:g}"


@dataclass
class ImpactTable:
    layer: int
    site: Site
    impacts: np.ndarray  # (n_sentences, width), float64, >= 0


# -- parallel impact formulas -------------------------------------------------


def ffn_impacts(h_act, w_down) -> np.ndarray:
    """impact_k = ||H_act[:, k]|| * ||W_down[k, :]||, the norm of their outer product."""
    h_act = np.ascontiguousarray(h_act)
    w_down = np.ascontiguousarray(w_down)
    if h_act.ndim != 2 or w_down.ndim != 2 or h_act.shape[1] != w_down.shape[0]:
        raise ValueError(f"ffn_impacts shape mismatch: H_act {h_act.shape}, W_down {w_down.shape}")
    return kernels.ffn_impacts(h_act, w_down)


def attn_v_impacts(attn, v) -> np.ndarray:
    """impact_k = ||A @ V[:, k]||."""
    attn = np.ascontiguousarray(attn)
    v = np.ascontiguousarray(v)
    l = attn.shape[0]
    if attn.shape != (l, l) or v.ndim != 2 or v.shape[0] != l:
        raise ValueError(f"attn_v_impacts shape mismatch: A {attn.shape}, V {v.shape}")
    return kernels.attn_v_impacts(attn, v)


def attn_qk_impacts(q, k, v, scale: float, causal: bool = True, site: Site = Site.ATTN_Q) -> np.ndarray:
    """Impact of dropping column c of Q (or K) through the softmax.

    Both sites use the same rank-one score correction q[:, c] k[:, c]^T * scale,
    so the result does not depend on ``site``; it is accepted for symmetry.
    """
    if site not in (Site.ATTN_Q, Site.ATTN_K):
        raise ValueError("attn_qk_impacts only scores AttnQ/AttnK neurons")
    q, k, v = (np.ascontiguousarray(m) for m in (q, k, v))
    if q.ndim != 2 or q.shape != k.shape or v.ndim != 2 or v.shape[0] != q.shape[0]:
        raise ValueError(f"attn_qk_impacts shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}")
    return kernels.attn_qk_impacts(q, k, v, float(scale), bool(causal))


def layer_impacts(model: ModelBundle, trace: ForwardTrace) -> dict[tuple[int, Site], np.ndarray]:
    """Layer-local impacts of every detectable neuron for one traced sentence."""
    cfg = model.config
    scale = 1.0 / math.sqrt(cfg.d_head)
    out = {}
    for layer, (lw, lt) in enumerate(zip(model.layers, trace.layers)):
        out[(layer, Site.FFN_INTER)] = ffn_impacts(lt.h_act, lw.wdown)
        qk = []
        vv = []
        for h in range(cfg.n_heads):
            q, k, v = trace.head_slice(layer, h, cfg.d_head)
            qk.append(attn_qk_impacts(q, k, v, scale))
            vv.append(attn_v_impacts(lt.attn[h], v))
        qk = np.concatenate(qk)
        out[(layer, Site.ATTN_Q)] = qk
        out[(layer, Site.ATTN_K)] = qk.copy()
        out[(layer, Site.ATTN_V)] = np.concatenate(vv)
    return out


# -- brute-force oracle ------------------------------------------------------


def _ffn64(x, wgate, wup, wdown):
    g = x @ wgate
    return (g / (1.0 + np.exp(-g)) * (x @ wup)) @ wdown


def _heads64(x, wq, wk, wv, n_heads, d_head):
    q, k, v = x @ wq, x @ wk, x @ wv
    l = x.shape[0]
    future = np.triu(np.ones((l, l), dtype=bool), k=1)
    outs = []
    for h in range(n_heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        s = np.where(future, -np.inf, q[:, sl] @ k[:, sl].T / math.sqrt(d_head))
        e = np.exp(s - s.max(axis=1, keepdims=True))
        outs.append((e / e.sum(axis=1, keepdims=True)) @ v[:, sl])
    return np.concatenate(outs, axis=1)


def _layer_local(model: ModelBundle, trace: ForwardTrace, neuron: NeuronId) -> float:
    cfg = model.config
    lw = model.layers[neuron.layer]
    lt = trace.layers[neuron.layer]
    col = column_of(cfg, neuron)
    f64 = lambda m: np.array(m, dtype=np.float64)  # noqa: E731
    if neuron.site == Site.FFN_INTER:
        x = f64(lt.ffn_in)
        wg, wu, wd = f64(lw.wgate), f64(lw.wup), f64(lw.wdown)
        base = _ffn64(x, wg, wu, wd)
        wg[:, col] = 0.0
        wu[:, col] = 0.0
        wd[col, :] = 0.0
        ablated = _ffn64(x, wg, wu, wd)
    else:
        x = f64(lt.attn_in)
        ws = {Site.ATTN_Q: f64(lw.wq), Site.ATTN_K: f64(lw.wk), Site.ATTN_V: f64(lw.wv)}
        base = _heads64(x, ws[Site.ATTN_Q], ws[Site.ATTN_K], ws[Site.ATTN_V], cfg.n_heads, cfg.d_head)
        ws[neuron.site][:, col] = 0.0
        ablated = _heads64(x, ws[Site.ATTN_Q], ws[Site.ATTN_K], ws[Site.ATTN_V], cfg.n_heads, cfg.d_head)
    d = base - ablated
    return float(np.sqrt((d * d).sum()))


def sequential_oracle(
    model: ModelBundle,
    tokens,
    neuron: NeuronId,
    scope: str = LAYER_LOCAL,
    trace: ForwardTrace | None = None,
) -> float:
    """Impact of one neuron by explicit zeroing and recomputation.

    ``"layer"``: norm of the owning sublayer's output change (FFN output, or
    the concatenated head outputs before W_O) with the sublayer input held at
    its traced value, recomputed in float64. ``"final"``: norm of the change
    in the residual stream after the last block from a full masked forward.
    """
    cfg = model.config
    check_neuron(cfg, neuron)
    ids = as_tokens(cfg, tokens)
    if trace is None:
        trace = forward(model, ids)
    if scope == LAYER_LOCAL:
        return _layer_local(model, trace, neuron)
    if scope == FINAL_OUTPUT:
        masked = forward_masked(model, ids, AblationMask.from_neurons([neuron], cfg))
        d = np.asarray(trace.final_resid, np.float64) - np.asarray(masked.final_resid, np.float64)
        return float(np.sqrt((d * d).sum()))
    raise ValueError(f"unknown scope {scope!r}")


def oracle_impacts(model: ModelBundle, tokens, scope: str = LAYER_LOCAL) -> dict[tuple[int, Site], np.ndarray]:
    """Every detectable neuron scored by :func:`sequential_oracle`."""
    cfg = model.config
    ids = as_tokens(cfg, tokens)
    trace = forward(model, ids)
    out = {}
    for layer in range(cfg.n_layers):
        for site in Site:
            out[(layer, site)] = np.array(
                [
                    sequential_oracle(model, ids, neuron_at(cfg, layer, site, c), scope, trace)
                    for c in range(site_width(cfg, site))
                ]
            )
    return out


# -- detection ---------------------------------------------------------------


def top_count(q: float, width: int) -> int:
    """How many neurons of a ``width``-wide site a top-q cut keeps (rounded up)."""
    return min(width, math.ceil(round(q * width, 9)))


def activated(impacts: np.ndarray, cfg: DetectionConfig) -> np.ndarray:
    """Boolean selector of neurons counted as activated for one sentence."""
    impacts = np.asarray(impacts)
    if cfg.criterion == "sigma":
        return impacts >= cfg.threshold
    keep = np.zeros(impacts.shape, dtype=bool)
    # stable sort: equal impacts resolve toward the lower NeuronId
    order = np.argsort(-impacts, kind="stable")
    keep[order[: top_count(cfg.threshold, impacts.size)]] = True
    return keep


def sentence_impacts(model: ModelBundle, tokens, scope: str = LAYER_LOCAL):
    if scope == LAYER_LOCAL:
        return layer_impacts(model, forward(model, tokens))
    return oracle_impacts(model, tokens, FINAL_OUTPUT)


def impact_tables(model: ModelBundle, corpus, scope: str = LAYER_LOCAL) -> list[ImpactTable]:
    sentences = list(getattr(corpus, "sentences", corpus))
    if not sentences:
        raise ValueError("impact tables need a non-empty corpus")
    rows = [sentence_impacts(model, s, scope) for s in sentences]
    return [ImpactTable(layer, site, np.stack([r[(layer, site)] for r in rows])) for (layer, site) in rows[0]]


def select_neurons(model_config, tables: list[ImpactTable], cfg: DetectionConfig) -> NeuronSet:
    """Neurons activated on at least a ``tau`` fraction of sentences."""
    ids = []
    for table in tables:
        n_sent = table.impacts.shape[0]
        counts = np.zeros(table.impacts.shape[1], dtype=np.int64)
        for row in table.impacts:
            counts += activated(row, cfg)
        need = cfg.tau * n_sent - 1e-9
        ids.extend(
            neuron_at(model_config, table.layer, table.site, c) for c in np.flatnonzero(counts >= need)
        )
    return NeuronSet(ids)


def detect_language_neurons(model: ModelBundle, corpus, cfg: DetectionConfig | None = None) -> NeuronSet:
    cfg = cfg or DetectionConfig()
    return select_neurons(model.config, impact_tables(model, corpus, cfg.scope), cfg)


__all__ = [
    "ATTN_SITES",
    "DetectionConfig",
    "FINAL_OUTPUT",
    "ImpactTable",
    "LAYER_LOCAL",
    "activated",
    "attn_qk_impacts",
    "attn_v_impacts",
    "detect_language_neurons",
    "ffn_impacts",
    "impact_tables",
    "layer_impacts",
    "oracle_impacts",
    "select_neurons",
    "sentence_impacts",
    "sequential_oracle",
    "top_count",
]
