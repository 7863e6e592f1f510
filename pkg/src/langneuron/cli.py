"""Detect, score and train language neurons from one JSON run config.

Commands: detect, classify, ablate, score, train, report. Each reads the
config given by ``--config`` and writes into the output directory; flags
override the matching config fields.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .ablation import ImportanceReport, build_report, delta_ppl
from .container import load_model, save_model
from .corpus import LanguageCorpus, SynthSpec, load_corpus, synth_language
from .detect import DetectionConfig, detect_language_neurons
from .model import ModelBundle, ModelConfig, init_random, perplexity
from .neurons import NeuronSet
from .sets import COMPLEMENT, STRICT_UNIQUE, classify, fmt, neuron_fraction, profile_report
from .training import (
    GradientMask,
    TrainConfig,
    TrainingDiverged,
    parse_strategy,
    select_strategy,
    strategy_neurons,
    train_masked,
)

log = logging.getLogger("langneuron")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_UNDEFINED = 4
EXIT_DIVERGED = 5

HELD_OUT_SEED_OFFSET = 10007


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    base_dir: Path
    model: dict
    languages: dict[str, dict]
    corpus_n: int = 1000
    corpus_max_len: int | None = None
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    mode: str = COMPLEMENT
    random_seeds: int = 10
    held_out: bool = False
    training: TrainConfig = field(default_factory=TrainConfig)
    out: Path = Path("out")
    seed: int = 0

    # -- construction -------------------------------------------------------------

    @classmethod
    def load(cls, path, overrides: argparse.Namespace | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from exc
        return cls.from_dict(raw, path.parent, overrides)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path, ov: argparse.Namespace | None = None) -> "RunConfig":
        try:
            det = dict(raw.get("detection", {}))
            crit = getattr(ov, "criterion", None) or det.get("criterion", "topq:0.01")
            kind, value = DetectionConfig.parse_criterion(crit)
            scope = getattr(ov, "scope", None) or det.get("scope", "layer")
            tau = getattr(ov, "tau", None)
            detection = DetectionConfig(kind, value, float(det.get("tau", 0.9) if tau is None else tau), scope)

            mode = getattr(ov, "mode", None) or raw.get("classification", {}).get("mode", COMPLEMENT)
            if mode not in (COMPLEMENT, STRICT_UNIQUE):
                raise ValueError(f"unknown classification mode {mode!r}")

            seed = getattr(ov, "seed", None)
            seed = int(raw.get("seed", 0) if seed is None else seed)

            tr = dict(raw.get("training", {}))
            if getattr(ov, "strategy", None):
                tr["strategy"] = ov.strategy
            tr.setdefault("seed", seed)
            training = TrainConfig(**tr)

            corpus = raw.get("corpus", {})
            score = raw.get("score", {})
            out = getattr(ov, "out", None) or raw.get("out", "out")
            languages = raw.get("languages") or {}
            if len(languages) < 1:
                raise ValueError("config needs at least one language")
            model = raw.get("model")
            if not isinstance(model, dict) or not ("path" in model or "init" in model):
                raise ValueError("model must give either 'path' or 'init'")
            held = getattr(ov, "held_out", False) or bool(score.get("held_out", False))
            cfg = cls(
                base_dir=base_dir,
                model=model,
                languages=languages,
                corpus_n=int(corpus.get("n", 1000)),
                corpus_max_len=corpus.get("max_len"),
                detection=detection,
                mode=mode,
                random_seeds=int(score.get("random_seeds", 10)),
                held_out=held,
                training=training,
                out=(base_dir / out) if not getattr(ov, "out", None) else Path(out),
                seed=seed,
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from exc
        cfg.validate()
        return cfg

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        if "path" in self.model and not self._path(self.model["path"]).exists():
            raise CliError(f"model file {self.model['path']} does not exist", EXIT_CONFIG)
        for tag, spec in self.languages.items():
            for key in ("path", "held_out"):
                if key in spec and not self._path(spec[key]).exists():
                    raise CliError(f"{tag}: corpus file {spec[key]} does not exist", EXIT_CONFIG)
            if "path" not in spec and "synth" not in spec:
                raise CliError(f"{tag}: language needs 'path' or 'synth'", EXIT_CONFIG)

    # -- materialization ------------------------------------------------------------

    def build_model(self) -> ModelBundle:
        if "path" in self.model:
            return load_model(self._path(self.model["path"]))
        try:
            mcfg = ModelConfig.from_dict(self.model["init"])
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid model config: {exc}", EXIT_CONFIG) from exc
        model = init_random(mcfg, int(self.model.get("seed", self.seed)))
        if "pretrain" in self.model:
            # Full-parameter SGD on a separate, larger synthetic/file sample.
            spec = dict(self.model["pretrain"])
            n = int(spec.pop("n", self.corpus_n))
            corpora = self.corpora(model, n=n, seed_offset=int(spec.pop("corpus_seed_offset", 1)))
            try:
                tcfg = TrainConfig(**spec)
            except (TypeError, ValueError) as exc:
                raise CliError(f"invalid pretrain config: {exc}", EXIT_CONFIG) from exc
            model, _ = train_masked(model, list(corpora.values()), GradientMask.full(model), tcfg)
        return model

    def _max_len(self, model: ModelBundle) -> int:
        return int(self.corpus_max_len or model.config.max_seq_len)

    def _corpus(
        self, tag: str, spec: dict, model: ModelBundle, held_out: bool, n=None, seed_offset: int = 0
    ) -> LanguageCorpus:
        max_len = self._max_len(model)
        n = int(spec.get("n", self.corpus_n) if n is None else n)
        if "synth" in spec:
            s = dict(spec["synth"])
            s["alphabet"] = s["alphabet"].encode("utf-8")
            s.setdefault("language", tag)
            s["seed"] = int(s.get("seed", 0)) + seed_offset + (HELD_OUT_SEED_OFFSET if held_out else 0)
            try:
                synth = SynthSpec(**s)
            except TypeError as exc:
                raise CliError(f"{tag}: invalid synth spec: {exc}", EXIT_CONFIG) from exc
            return synth_language(synth, n, max_len)
        path = spec["held_out"] if held_out and "held_out" in spec else spec["path"]
        seed = int(spec.get("seed", self.seed)) + seed_offset
        corpus = load_corpus(self._path(path), tag, n, seed, max_len)
        if corpus.shortfall:
            log.warning("%s: only %d usable lines (wanted %d)", tag, len(corpus), n)
        return corpus

    def corpora(self, model: ModelBundle, n=None, seed_offset: int = 0) -> dict[str, LanguageCorpus]:
        try:
            return {
                tag: self._corpus(tag, spec, model, False, n, seed_offset)
                for tag, spec in sorted(self.languages.items())
            }
        except ValueError as exc:
            raise CliError(str(exc), EXIT_PRECONDITION) from exc

    def eval_corpora(self, model: ModelBundle, force: bool = False) -> dict[str, LanguageCorpus]:
        """Held-out corpora when requested (or forced), else the detection corpora."""
        if not (self.held_out or force):
            return self.corpora(model)
        out = {}
        for tag, spec in sorted(self.languages.items()):
            usable = "synth" in spec or "held_out" in spec
            out[tag] = self._corpus(tag, spec, model, usable)
        return out


# -- pipeline steps ---------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def run_detect(cfg: RunConfig, model: ModelBundle, corpora) -> dict[str, NeuronSet]:
    sets = {}
    chash = model.config.hash()
    rows = [["language", "sentences", "count", "fraction", "criterion", "tau", "scope", "seed", "note"]]
    for tag, corpus in corpora.items():
        if not len(corpus):
            raise CliError(f"{tag}: corpus is empty", EXIT_PRECONDITION)
        found = detect_language_neurons(model, corpus, cfg.detection)
        sets[tag] = found
        _write(cfg.out / "sets" / f"{tag}.neurons", found.dumps(chash, cfg.seed))
        note = "empty" if not len(found) else ""
        rows.append(
            [tag, len(corpus), len(found), fmt(neuron_fraction(found, model.config)),
             cfg.detection.criterion_text, fmt(cfg.detection.tau), cfg.detection.scope, cfg.seed, note]
        )
        log.info("%s: %d language-related neurons", tag, len(found))
    _write(cfg.out / "detect_summary.csv", _csv(rows))
    return sets


def _load_sets(cfg: RunConfig, model: ModelBundle) -> dict[str, NeuronSet]:
    sets = {}
    for tag in sorted(cfg.languages):
        path = cfg.out / "sets" / f"{tag}.neurons"
        if not path.exists():
            raise CliError(f"missing {path}; run `detect` first", EXIT_PRECONDITION)
        found, header = NeuronSet.load(path)
        if header.get("config") != model.config.hash():
            raise CliError(f"{path} was produced for a different model config", EXIT_PRECONDITION)
        sets[tag] = found
    return sets


def run_classify(cfg: RunConfig, model: ModelBundle, sets: dict[str, NeuronSet]):
    if len(sets) < 2:
        raise CliError("classification needs at least two languages", EXIT_PRECONDITION)
    profile = classify(sets, cfg.mode)
    chash = model.config.hash()
    _write(cfg.out / "profile.txt", f"seed\t{cfg.seed}\n" + profile_report(profile, model.config))
    _write(cfg.out / "classify" / "shared.neurons", profile.shared.dumps(chash, cfg.seed))
    for tag, ex in profile.exclusive.items():
        _write(cfg.out / "classify" / f"exclusive_{tag}.neurons", ex.dumps(chash, cfg.seed))
    return profile


def run_score(cfg: RunConfig, model: ModelBundle, random_seeds=None) -> ImportanceReport:
    corpora = cfg.corpora(model)
    sets = run_detect(cfg, model, corpora)
    profile = run_classify(cfg, model, sets)
    seeds = range(cfg.random_seeds) if random_seeds is None else random_seeds
    report = build_report(model, cfg.eval_corpora(model), profile, seeds, seed=cfg.seed)
    return report


# -- commands -----------------------------------------------------------------------------


def cmd_detect(cfg: RunConfig) -> int:
    model = cfg.build_model()
    run_detect(cfg, model, cfg.corpora(model))
    return EXIT_OK


def cmd_classify(cfg: RunConfig) -> int:
    model = cfg.build_model()
    run_classify(cfg, model, _load_sets(cfg, model))
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, set_path: str | None = None) -> int:
    model = cfg.build_model()
    corpora = cfg.eval_corpora(model)
    targets: list[tuple[str, str, NeuronSet]] = []
    if set_path:
        extra, _ = NeuronSet.load(set_path)
        targets = [(tag, Path(set_path).name, extra) for tag in corpora]
    else:
        profile = run_classify(cfg, model, _load_sets(cfg, model))
        for tag in corpora:
            targets.append((tag, "shared", profile.shared))
            targets.append((tag, f"exclusive_{tag}", profile.exclusive[tag]))
    rows = [["language", "set", "size", "ppl_base", "delta_ppl", "seed"]]
    bases = {tag: perplexity(model, c) for tag, c in corpora.items()}
    for tag, name, neurons in targets:
        d = delta_ppl(model, corpora[tag], neurons, bases[tag])
        rows.append([tag, name, len(neurons), fmt(bases[tag]), fmt(d), cfg.seed])
    _write(cfg.out / "ablation.csv", _csv(rows))
    return EXIT_OK


def cmd_score(cfg: RunConfig) -> int:
    model = cfg.build_model()
    report = run_score(cfg, model)
    _write(cfg.out / "score.txt", report.to_text())
    _write(cfg.out / "score.kv", report.to_kv())
    if not report.consistent():
        raise CliError("importance report failed its self-consistency check", 1)
    if not report.defined:
        log.warning("language agnostic score is undefined (an importance ratio had a zero denominator)")
        return EXIT_UNDEFINED
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    model = cfg.build_model()
    tcfg = cfg.training
    score = None
    if tcfg.strategy == "auto":
        report = run_score(cfg, model, random_seeds=())
        score = report.agnostic_score
        if score is None:
            raise CliError("agnostic score undefined; pass --strategy to train anyway", EXIT_UNDEFINED)
        strategy = select_strategy(score, tcfg.low_cut, tcfg.high_cut)
        profile = classify(_load_sets(cfg, model), cfg.mode)
        source = "auto"
    else:
        strategy = tcfg.strategy
        source = "override"
        profile = run_classify(cfg, model, run_detect(cfg, model, cfg.corpora(model)))
    neurons = strategy_neurons(strategy, profile, model.config, tcfg.seed)
    mask = GradientMask.from_neurons(neurons, model)
    corpora = cfg.corpora(model)
    valid = cfg.eval_corpora(model, force=True)
    before = {tag: perplexity(model, c) for tag, c in valid.items()}
    try:
        trained, trace = train_masked(model, list(corpora.values()), mask, tcfg, validation=valid)
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc

    ok = mask_untouched(model, trained, mask)
    save_model(cfg.out / "trained.nscp", trained)
    _write(cfg.out / "loss_trace.txt", f"# seed={tcfg.seed} strategy={strategy}\n" + trace.to_text())
    lines = [
        f"seed={tcfg.seed}",
        f"strategy={strategy}",
        f"strategy_source={source}",
        f"agnostic_score={fmt(score)}",
        f"n_neurons={len(neurons)}",
        f"n_parameters={mask.n_parameters}",
        f"steps={tcfg.steps}",
        f"learning_rate={fmt(float(tcfg.learning_rate))}",
        f"final_loss={fmt(trace.losses[-1])}",
        f"mask_check={'pass' if ok else 'FAIL'}",
    ]
    for tag in valid:
        lines.append(f"val_ppl_before.{tag}={fmt(before[tag])}")
        lines.append(f"val_ppl_after.{tag}={fmt(trace.per_language[tag])}")
    _write(cfg.out / "train.kv", "\n".join(lines) + "\n")
    if not ok:
        raise CliError("parameters outside the gradient mask changed", 1)
    return EXIT_OK


def mask_untouched(before: ModelBundle, after: ModelBundle, mask: GradientMask) -> bool:
    """True when every parameter outside ``mask`` is bitwise unchanged."""
    a = before.named()
    for name, w in after.named().items():
        sel = mask.selectors.get(name)
        frozen = np.ones(w.shape, dtype=bool) if sel is None else ~sel
        if not np.array_equal(a[name][frozen].view(np.uint32), w[frozen].view(np.uint32)):
            return False
    return True


def _read_kv(path: Path) -> dict[str, str] | None:
    if not path.exists():
        return None
    return dict(line.split("=", 1) for line in path.read_text(encoding="utf-8").splitlines() if "=" in line)


def cmd_report(out_dir: Path) -> int:
    out_dir = Path(out_dir)
    if not out_dir.is_dir() or not any(out_dir.iterdir()):
        raise CliError(f"output directory {out_dir} is missing or empty", EXIT_PRECONDITION)
    lines = ["# langneuron run report", f"directory\t{out_dir.name}", ""]
    summary = [["section", "key", "value"]]

    det = out_dir / "detect_summary.csv"
    lines.append("## detection")
    if det.exists():
        rows = list(csv.DictReader(det.read_text(encoding="utf-8").splitlines()))
        for r in rows:
            lines.append(f"{r['language']}\tcount={r['count']}\tfraction={r['fraction']}\t{r['note']}".rstrip())
            summary.append(["detect", f"{r['language']}.count", r["count"]])
    else:
        lines.append("absent")
        summary.append(["detect", "status", "absent"])

    lines += ["", "## classification"]
    prof = out_dir / "profile.txt"
    if prof.exists():
        body = prof.read_text(encoding="utf-8").rstrip("\n").splitlines()
        lines += [ln for ln in body if ln and not ln.startswith("#")]
        for ln in body:
            if ln.startswith(("shared_size\t", "shared_ratio\t")):
                k, v = ln.split("\t", 1)
                summary.append(["classify", k, v])
    else:
        lines.append("absent")
        summary.append(["classify", "status", "absent"])

    lines += ["", "## score"]
    kv = _read_kv(out_dir / "score.kv")
    if kv is not None:
        for k in ("agnostic_score", "shared_ratio", "n_shared"):
            lines.append(f"{k}\t{kv.get(k, 'absent')}")
            summary.append(["score", k, kv.get(k, "absent")])
        for k in sorted(k for k in kv if k.startswith("lang.")):
            lines.append(f"{k}\t{kv[k]}")
    else:
        lines.append("absent")
        summary.append(["score", "status", "absent"])

    lines += ["", "## training"]
    kv = _read_kv(out_dir / "train.kv")
    if kv is not None:
        for k, v in kv.items():
            lines.append(f"{k}\t{v}")
            summary.append(["train", k, v])
    else:
        lines.append("absent")
        summary.append(["train", "status", "absent"])

    text = "\n".join(lines) + "\n"
    _write(out_dir / "report.txt", text)
    _write(out_dir / "summary.csv", _csv(summary))
    sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="langneuron", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--threads", type=int, default=0, help="numba worker threads")
    common.add_argument("--scope", choices=["layer", "final"])
    common.add_argument("--criterion", help="topq:F or sigma:F")
    common.add_argument("--tau", type=float, help="consistency fraction in (0, 1]")
    common.add_argument("--mode", choices=[COMPLEMENT, STRICT_UNIQUE])
    common.add_argument("--strategy", help="auto|all|shared|exclusive|random:N")
    common.add_argument("--held-out", action="store_true", help="measure perplexity on held-out text")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, text in [
        ("detect", "find language-related neurons per language"),
        ("classify", "split detected sets into shared and exclusive"),
        ("ablate", "perplexity change from zeroing neuron sets"),
        ("score", "detect, classify, ablate and compute importance metrics"),
        ("train", "neuron-targeted continual training"),
    ]:
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "ablate":
            sp.add_argument("--set", dest="set_path", help="ablate this serialized NeuronSet instead")
    rp = sub.add_parser("report", help="merge run artifacts into one summary")
    rp.add_argument("--out", required=True, help="output directory of a previous run")
    rp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            return cmd_report(Path(args.out))
        if args.threads:
            _backend.set_threads(args.threads)
        if args.strategy and args.strategy != "auto":
            try:
                parse_strategy(args.strategy)
            except ValueError as exc:
                raise CliError(str(exc), EXIT_CONFIG) from exc
        cfg = RunConfig.load(args.config, args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        if args.command == "detect":
            return cmd_detect(cfg)
        if args.command == "classify":
            return cmd_classify(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.set_path)
        if args.command == "score":
            return cmd_score(cfg)
        return cmd_train(cfg)
    except CliError as exc:
        print(f"langneuron: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
