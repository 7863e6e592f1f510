"""A small pre-norm decoder-only transformer with a gated SiLU FFN.

No biases, no rotary encoding: learned position embeddings are added once at
the input. Everything runs through :mod:`langneuron.linalg`, so a model cast
to float64 gives a float64 forward pass (used by the finite-difference checks).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .neurons import AblationMask, Site

BOS, EOS, PAD = 256, 257, 258

LAYER_TENSORS = ("wq", "wk", "wv", "wo", "wgate", "wup", "wdown", "attn_gain", "ffn_gain")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 16
    n_heads: int = 2
    d_head: int = 8
    d_inter: int = 32
    vocab_size: int = 259
    max_seq_len: int = 32
    rms_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_inter", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*d_head ({self.n_heads}*{self.d_head})"
            )
        if not self.rms_eps > 0:
            raise ValueError("rms_eps must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wgate: np.ndarray
    wup: np.ndarray
    wdown: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray


@dataclass
class ModelBundle:
    """Config plus weights. Treat as immutable; helpers return new bundles."""

    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    final_gain: np.ndarray
    unemb: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        """Tensors keyed by container name, in canonical order."""
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, lw in enumerate(self.layers):
            for name in LAYER_TENSORS:
                out[f"layer.{i}.{name}"] = getattr(lw, name)
        out["final_gain"] = self.final_gain
        out["unemb"] = self.unemb
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "ModelBundle":
        expected = expected_shapes(config)
        missing = set(expected) - set(tensors)
        if missing:
            raise ValueError(f"missing tensors: {sorted(missing)}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"{name}: shape {tuple(tensors[name].shape)} != expected {shape}")
        layers = [
            LayerWeights(**{n: tensors[f"layer.{i}.{n}"] for n in LAYER_TENSORS})
            for i in range(config.n_layers)
        ]
        return cls(
            config=config,
            tok_emb=tensors["tok_emb"],
            pos_emb=tensors["pos_emb"],
            layers=layers,
            final_gain=tensors["final_gain"],
            unemb=tensors["unemb"],
        )

    def replace(self, updates: dict[str, np.ndarray]) -> "ModelBundle":
        tensors = self.named()
        tensors.update(updates)
        return ModelBundle.from_named(self.config, tensors)

    def astype(self, dtype) -> "ModelBundle":
        return ModelBundle.from_named(
            self.config, {k: np.ascontiguousarray(v, dtype=dtype) for k, v in self.named().items()}
        )

    def copy(self) -> "ModelBundle":
        return ModelBundle.from_named(self.config, {k: v.copy() for k, v in self.named().items()})

    @property
    def dtype(self):
        return self.tok_emb.dtype


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_inter
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_seq_len, d)}
    layer = {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "wgate": (d, f), "wup": (d, f), "wdown": (f, d),
        "attn_gain": (d,), "ffn_gain": (d,),
    }
    for i in range(config.n_layers):
        for name in LAYER_TENSORS:
            shapes[f"layer.{i}.{name}"] = layer[name]
    shapes["final_gain"] = (d,)
    shapes["unemb"] = (d, config.vocab_size)
    return shapes


def init_random(config: ModelConfig, seed: int) -> ModelBundle:
    """Gaussian weights with std 1/sqrt(d_model); norm gains start at one."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(config.d_model)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return ModelBundle.from_named(config, tensors)


@dataclass
class LayerTrace:
    resid_attn: np.ndarray  # residual stream entering the block (X_attn)
    attn_in: np.ndarray  # rms-normed input to W_Q/W_K/W_V
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray  # (n_heads, l, l) causal softmax probabilities
    heads: np.ndarray  # concatenated head outputs, pre W_O
    resid_ffn: np.ndarray  # residual stream entering the FFN (X_ffn)
    ffn_in: np.ndarray
    gate: np.ndarray  # X W_gate, pre-SiLU
    up: np.ndarray
    h_act: np.ndarray
    ffn_out: np.ndarray


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    layers: list[LayerTrace] = field(default_factory=list)
    final_resid: np.ndarray | None = None  # residual stream after the last block
    final_hidden: np.ndarray | None = None  # after the final norm
    logits: np.ndarray | None = None

    def head_slice(self, layer: int, head: int, d_head: int):
        """(Q, K, V) for one head of one layer."""
        lt = self.layers[layer]
        sl = slice(head * d_head, (head + 1) * d_head)
        return lt.q[:, sl], lt.k[:, sl], lt.v[:, sl]


def as_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).ravel()
    if ids.size == 0:
        raise ValueError("empty token sequence")
    if ids.size > config.max_seq_len:
        raise ValueError(f"sequence length {ids.size} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of range for vocab_size")
    return ids


def attention_heads(config: ModelConfig, q, k, v):
    """Causal multi-head attention up to (not including) W_O.

    Returns the concatenated head outputs and the (n_heads, l, l) probabilities.
    """
    dh = config.d_head
    scale = q.dtype.type(1.0 / math.sqrt(dh))
    probs = []
    outs = []
    for h in range(config.n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = linalg.matmul(q[:, sl], k[:, sl].T) * scale
        a = linalg.softmax_rows(scores, causal=True)
        probs.append(a)
        outs.append(linalg.matmul(a, v[:, sl]))
    return np.concatenate(outs, axis=1), np.stack(probs)


def ffn_block(lw: LayerWeights, x):
    gate = linalg.matmul(x, lw.wgate)
    up = linalg.matmul(x, lw.wup)
    h_act = linalg.hadamard(linalg.silu(gate), up)
    return gate, up, h_act, linalg.matmul(h_act, lw.wdown)


def forward(model: ModelBundle, tokens) -> ForwardTrace:
    cfg = model.config
    ids = as_tokens(cfg, tokens)
    n = ids.size
    x = model.tok_emb[ids] + model.pos_emb[:n]
    trace = ForwardTrace(tokens=ids)
    for lw in model.layers:
        attn_in = linalg.rmsnorm_rows(x, lw.attn_gain, cfg.rms_eps)
        q = linalg.matmul(attn_in, lw.wq)
        k = linalg.matmul(attn_in, lw.wk)
        v = linalg.matmul(attn_in, lw.wv)
        heads, probs = attention_heads(cfg, q, k, v)
        x_ffn = x + linalg.matmul(heads, lw.wo)
        ffn_in = linalg.rmsnorm_rows(x_ffn, lw.ffn_gain, cfg.rms_eps)
        gate, up, h_act, ffn_out = ffn_block(lw, ffn_in)
        trace.layers.append(
            LayerTrace(
                resid_attn=x, attn_in=attn_in, q=q, k=k, v=v, attn=probs, heads=heads,
                resid_ffn=x_ffn, ffn_in=ffn_in, gate=gate, up=up, h_act=h_act, ffn_out=ffn_out,
            )
        )
        x = x_ffn + ffn_out
    trace.final_resid = x
    trace.final_hidden = linalg.rmsnorm_rows(x, model.final_gain, cfg.rms_eps)
    trace.logits = linalg.matmul(trace.final_hidden, model.unemb)
    return trace


def apply_mask(model: ModelBundle, mask: AblationMask | None) -> ModelBundle:
    """Copy of ``model`` with every masked neuron's owning parameters zeroed.

    FFN neurons zero the W_gate column, W_up column and W_down row together;
    attention neurons zero one column of W_Q, W_K or W_V. Untouched tensors
    are shared with the input, which is never modified.
    """
    if not mask:
        return model
    if mask.config != model.config:
        raise ValueError("mask was built for a different model config")
    updates: dict[str, np.ndarray] = {}

    def zeroed(name):
        if name not in updates:
            updates[name] = model.named()[name].copy()
        return updates[name]

    attn_names = {Site.ATTN_Q: "wq", Site.ATTN_K: "wk", Site.ATTN_V: "wv"}
    for (layer, site), cols in sorted(mask.columns.items()):
        if site == Site.FFN_INTER:
            zeroed(f"layer.{layer}.wgate")[:, cols] = 0
            zeroed(f"layer.{layer}.wup")[:, cols] = 0
            zeroed(f"layer.{layer}.wdown")[cols, :] = 0
        else:
            zeroed(f"layer.{layer}.{attn_names[site]}")[:, cols] = 0
    return model.replace(updates)


def forward_masked(model: ModelBundle, tokens, mask: AblationMask | None) -> ForwardTrace:
    return forward(apply_mask(model, mask), tokens)


def _sentences(corpus):
    return getattr(corpus, "sentences", corpus)


def token_nll(logits, ids) -> np.ndarray:
    """Next-token NLL (float64) for positions 1..l-1 given logits at 0..l-2."""
    z = np.asarray(logits[:-1], dtype=np.float64)
    mx = z.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(z - mx).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), ids[1:]]


def perplexity(model: ModelBundle, corpus, mask: AblationMask | None = None) -> float:
    """Token-weighted perplexity over every sentence of ``corpus``."""
    sentences = list(_sentences(corpus))
    if not sentences:
        raise ValueError("perplexity of an empty corpus")
    m = apply_mask(model, mask)
    total = 0.0
    count = 0
    for s in sentences:
        ids = as_tokens(model.config, s)
        if ids.size < 2:
            raise ValueError("perplexity needs sentences of at least 2 tokens")
        nll = token_nll(forward(m, ids).logits, ids)
        total += float(nll.sum())
        count += nll.size
    return math.exp(total / count)
