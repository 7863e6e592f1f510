"""Reverse-mode gradients, gradient masks and neuron-targeted SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .ablation import random_neurons
from .model import ModelBundle, as_tokens, forward, perplexity, token_nll
from .neurons import NeuronSet, Site, check_neuron, column_of
from .sets import LanguageNeuronProfile

LOW_CUT = math.log(2.0)
HIGH_CUT = math.log(11.0)

STRATEGIES = ("all", "shared", "exclusive", "random")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


# -- gradients ----------------------------------------------------------------


def _rmsnorm_backward(x, gain, dy, eps):
    x = x.astype(np.float64)
    dy = dy.astype(np.float64)
    g = gain.astype(np.float64)
    inv = 1.0 / np.sqrt((x * x).mean(axis=1) + eps)
    u = dy * g
    dx = inv[:, None] * u - (inv**3 / x.shape[1])[:, None] * x * (u * x).sum(axis=1)[:, None]
    dgain = (dy * x * inv[:, None]).sum(axis=0)
    return dx, dgain


def _sentence_grads(model: ModelBundle, ids: np.ndarray, n_total: int, acc: dict) -> float:
    """Add this sentence's share of the batch-mean gradient into ``acc`` (float64)."""
    cfg = model.config
    dt = model.dtype
    tr = forward(model, ids)
    l = ids.size
    z = tr.logits.astype(np.float64)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(l - 1), ids[1:]] -= 1.0
    p[l - 1] = 0.0
    dlogits = (p / n_total).astype(dt)
    nll = float(token_nll(tr.logits, ids).sum())

    acc["unemb"] += linalg.matmul(tr.final_hidden.T, dlogits)
    dh = linalg.matmul(dlogits, model.unemb.T)
    dx, dgain = _rmsnorm_backward(tr.final_resid, model.final_gain, dh, cfg.rms_eps)
    acc["final_gain"] += dgain
    dx = dx.astype(dt)

    scale = dt.type(1.0 / math.sqrt(cfg.d_head))
    dh_ = cfg.d_head
    for i in reversed(range(cfg.n_layers)):
        lw, lt = model.layers[i], tr.layers[i]
        pre = f"layer.{i}."
        # FFN sublayer
        acc[pre + "wdown"] += linalg.matmul(lt.h_act.T, dx)
        d_h = linalg.matmul(dx, lw.wdown.T).astype(np.float64)
        gate = lt.gate.astype(np.float64)
        sig = 1.0 / (1.0 + np.exp(-gate))
        d_up = (d_h * gate * sig).astype(dt)
        d_gate = (d_h * lt.up.astype(np.float64) * sig * (1.0 + gate * (1.0 - sig))).astype(dt)
        acc[pre + "wgate"] += linalg.matmul(lt.ffn_in.T, d_gate)
        acc[pre + "wup"] += linalg.matmul(lt.ffn_in.T, d_up)
        d_in = linalg.matmul(d_gate, lw.wgate.T) + linalg.matmul(d_up, lw.wup.T)
        d_res, dgain = _rmsnorm_backward(lt.resid_ffn, lw.ffn_gain, d_in, cfg.rms_eps)
        acc[pre + "ffn_gain"] += dgain
        dx = (dx.astype(np.float64) + d_res).astype(dt)
        # attention sublayer
        acc[pre + "wo"] += linalg.matmul(lt.heads.T, dx)
        d_heads = linalg.matmul(dx, lw.wo.T)
        dq = np.empty_like(lt.q)
        dk = np.empty_like(lt.k)
        dv = np.empty_like(lt.v)
        for h in range(cfg.n_heads):
            sl = slice(h * dh_, (h + 1) * dh_)
            a = lt.attn[h]
            d_o = d_heads[:, sl]
            dv[:, sl] = linalg.matmul(a.T, d_o)
            da = linalg.matmul(d_o, lt.v[:, sl].T).astype(np.float64)
            a64 = a.astype(np.float64)
            ds = (a64 * (da - (da * a64).sum(axis=1, keepdims=True))).astype(dt)
            dq[:, sl] = linalg.matmul(ds, lt.k[:, sl]) * scale
            dk[:, sl] = linalg.matmul(ds.T, lt.q[:, sl]) * scale
        acc[pre + "wq"] += linalg.matmul(lt.attn_in.T, dq)
        acc[pre + "wk"] += linalg.matmul(lt.attn_in.T, dk)
        acc[pre + "wv"] += linalg.matmul(lt.attn_in.T, dv)
        d_in = (
            linalg.matmul(dq, lw.wq.T).astype(np.float64)
            + linalg.matmul(dk, lw.wk.T)
            + linalg.matmul(dv, lw.wv.T)
        )
        d_res, dgain = _rmsnorm_backward(lt.resid_attn, lw.attn_gain, d_in, cfg.rms_eps)
        acc[pre + "attn_gain"] += dgain
        dx = (dx.astype(np.float64) + d_res).astype(dt)

    np.add.at(acc["tok_emb"], ids, dx.astype(np.float64))
    acc["pos_emb"][:l] += dx
    return nll


def loss_and_grad(model: ModelBundle, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy over all predicted tokens, and its gradient.

    Per-sentence gradients are summed into float64 accumulators in batch
    order and cast to the model dtype at the end.
    """
    seqs = [as_tokens(model.config, s) for s in batch]
    if not seqs:
        raise ValueError("empty batch")
    if any(s.size < 2 for s in seqs):
        raise ValueError("every sequence needs at least 2 tokens")
    n_total = sum(s.size - 1 for s in seqs)
    acc = {k: np.zeros(v.shape, dtype=np.float64) for k, v in model.named().items()}
    nll = 0.0
    for s in seqs:
        nll += _sentence_grads(model, s, n_total, acc)
    dt = model.dtype
    return nll / n_total, {k: v.astype(dt) for k, v in acc.items()}


def backward(model: ModelBundle, batch) -> dict[str, np.ndarray]:
    return loss_and_grad(model, batch)[1]


def mean_loss(model: ModelBundle, batch) -> float:
    """Mean next-token NLL, accumulated in float64 (the finite-difference target)."""
    total = 0.0
    count = 0
    for s in batch:
        ids = as_tokens(model.config, s)
        nll = token_nll(forward(model, ids).logits, ids)
        total += float(nll.sum())
        count += nll.size
    return total / count


# -- masks --------------------------------------------------------------------


class GradientMask:
    """Boolean update selectors keyed by tensor name; absent tensors are frozen."""

    def __init__(self, selectors: dict[str, np.ndarray] | None = None):
        self.selectors = {k: v for k, v in (selectors or {}).items() if v.any()}

    @classmethod
    def full(cls, model: ModelBundle) -> "GradientMask":
        return cls({k: np.ones(v.shape, dtype=bool) for k, v in model.named().items()})

    @classmethod
    def from_neurons(cls, neurons, model: ModelBundle) -> "GradientMask":
        """Same ownership as ablation: FFN neurons own a W_gate/W_up column and a W_down row."""
        cfg = model.config
        shapes = {k: v.shape for k, v in model.named().items()}
        sel: dict[str, np.ndarray] = {}

        def get(name):
            if name not in sel:
                sel[name] = np.zeros(shapes[name], dtype=bool)
            return sel[name]

        attn = {Site.ATTN_Q: "wq", Site.ATTN_K: "wk", Site.ATTN_V: "wv"}
        for n in neurons:
            check_neuron(cfg, n)
            col = column_of(cfg, n)
            pre = f"layer.{n.layer}."
            if n.site == Site.FFN_INTER:
                get(pre + "wgate")[:, col] = True
                get(pre + "wup")[:, col] = True
                get(pre + "wdown")[col, :] = True
            else:
                get(pre + attn[Site(n.site)])[:, col] = True
        return cls(sel)

    def __bool__(self) -> bool:
        return bool(self.selectors)

    @property
    def n_parameters(self) -> int:
        return int(sum(int(v.sum()) for v in self.selectors.values()))

    def apply(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: np.where(self.selectors[k], g, 0).astype(g.dtype) if k in self.selectors else np.zeros_like(g)
                for k, g in grads.items()}


# -- strategy ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    strategy: str = "auto"
    low_cut: float = LOW_CUT
    high_cut: float = HIGH_CUT

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not self.low_cut < self.high_cut:
            raise ValueError("low_cut must be below high_cut")
        if self.strategy != "auto":
            parse_strategy(self.strategy)


def parse_strategy(text: str) -> tuple[str, int | None]:
    """``"shared"`` -> ("shared", None); ``"random:12"`` -> ("random", 12)."""
    kind, _, arg = text.partition(":")
    if kind == "random":
        if not arg.isdigit():
            raise ValueError("random strategy needs a size, e.g. random:12")
        return kind, int(arg)
    if kind not in STRATEGIES or arg:
        raise ValueError(f"unknown strategy {text!r}")
    return kind, None


def select_strategy(score: float | None, low_cut: float = LOW_CUT, high_cut: float = HIGH_CUT) -> str:
    """Below ``low_cut`` train every language-related neuron, up to ``high_cut``
    the shared ones, above it the exclusive ones. Boundaries belong to the upper band."""
    if score is None or not math.isfinite(score):
        raise ValueError("strategy selection needs a defined agnostic score")
    if score < low_cut:
        return "all"
    if score < high_cut:
        return "shared"
    return "exclusive"


def strategy_neurons(strategy: str, profile: LanguageNeuronProfile, config, seed: int = 0) -> NeuronSet:
    kind, n = parse_strategy(strategy)
    if kind == "all":
        return profile.related
    if kind == "shared":
        return profile.shared
    if kind == "exclusive":
        return profile.all_exclusive
    return random_neurons(config, n, seed, exclude=profile.related)


# -- training loop --------------------------------------------------------------


@dataclass
class LossTrace:
    losses: list[float] = field(default_factory=list)
    final_perplexity: float | None = None
    per_language: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{i}\t{loss!r}" for i, loss in enumerate(self.losses)]
        for tag, ppl in self.per_language.items():
            lines.append(f"# val_ppl.{tag}\t{ppl!r}")
        if self.final_perplexity is not None:
            lines.append(f"# val_ppl\t{self.final_perplexity!r}")
        return "\n".join(lines) + "\n"


def _flatten(corpus) -> list[np.ndarray]:
    """Sentences of a corpus, a list of corpora, or a list of token sequences."""
    if hasattr(corpus, "sentences"):
        return list(corpus.sentences)
    out = []
    for item in corpus:
        if hasattr(item, "sentences"):
            out.extend(item.sentences)
        else:
            out.append(item)
    return out


def train_masked(
    model: ModelBundle,
    corpus,
    mask: GradientMask,
    cfg: TrainConfig,
    validation=None,
) -> tuple[ModelBundle, LossTrace]:
    """Plain SGD restricted to ``mask``; parameters outside it are never written.

    ``validation`` may be a corpus, a list of corpora, or a mapping
    language -> corpus; it defaults to the training sentences.
    """
    sentences = _flatten(corpus)
    if not sentences:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    params = {k: v for k, v in model.named().items()}
    current = model
    trace = LossTrace()
    bs = min(cfg.batch_size, len(sentences))
    for step in range(cfg.steps):
        batch = [sentences[i] for i in np.sort(rng.choice(len(sentences), size=bs, replace=False))]
        if not mask:
            loss = mean_loss(current, batch)
        else:
            loss, grads = loss_and_grad(current, batch)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        trace.losses.append(loss)
        if not mask:
            continue
        lr = current.dtype.type(cfg.learning_rate)
        for name, sel in mask.selectors.items():
            w = params[name].copy()
            w[sel] -= lr * grads[name][sel]
            params[name] = w
        current = ModelBundle.from_named(model.config, params)

    if validation is None:
        validation = sentences
    if isinstance(validation, dict):
        for tag, corp in validation.items():
            trace.per_language[tag] = perplexity(current, corp)
        trace.final_perplexity = perplexity(current, _flatten(list(validation.values())))
    else:
        trace.final_perplexity = perplexity(current, _flatten(validation))
    return current, trace
