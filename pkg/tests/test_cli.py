import copy
import json
import math
from pathlib import Path

import pytest

from conftest import GOLDEN, TOY_CONFIG
from langneuron.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_PRECONDITION, EXIT_UNDEFINED, main
from langneuron.container import load_model
from langneuron.model import ModelConfig, init_random
from langneuron.neurons import NeuronSet
from langneuron.sets import classify, shared_ratio

FAST = {
    "seed": 3,
    "model": {"init": {"n_layers": 1, "d_model": 8, "n_heads": 2, "d_head": 4, "d_inter": 8, "max_seq_len": 16},
              "seed": 3},
    "corpus": {"n": 6, "max_len": 16},
    "languages": {
        "aa": {"synth": {"alphabet": "abcd", "min_len": 3, "max_len": 10, "seed": 1}},
        "bb": {"synth": {"alphabet": "wxyz", "min_len": 3, "max_len": 10, "seed": 2}},
    },
    "detection": {"criterion": "topq:0.25", "tau": 0.5},
    "score": {"random_seeds": 2},
    "training": {"learning_rate": 0.05, "steps": 3, "batch_size": 4},
    "out": "out",
}


def write_config(tmp_path, **changes):
    raw = copy.deepcopy(FAST)
    raw.update(changes)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "toy"
    for cmd in ("detect", "score", "train"):
        assert run(cmd, "--config", TOY_CONFIG, "--out", out) == EXIT_OK
    assert run("report", "--out", out) == EXIT_OK
    return out


def test_sets_match_oracle_goldens(toy_run):
    for tag in ("aa", "bb"):
        assert (toy_run / "sets" / f"{tag}.neurons").read_bytes() == (GOLDEN / "sets" / f"{tag}.neurons").read_bytes()


def test_score_matches_golden(toy_run):
    def score(p):
        kv = dict(line.split("=", 1) for line in p.read_text().splitlines())
        return float(kv["agnostic_score"])

    assert abs(score(toy_run / "score.kv") - score(GOLDEN / "score.kv")) <= 1e-6


def test_report_matches_golden(toy_run):
    assert (toy_run / "report.txt").read_text() == (GOLDEN / "report.txt").read_text()


def test_toy_training_lowers_validation_perplexity(toy_run):
    kv = dict(line.split("=", 1) for line in (toy_run / "train.kv").read_text().splitlines())
    assert kv["mask_check"] == "pass"
    for tag in ("aa", "bb"):
        assert float(kv[f"val_ppl_after.{tag}"]) < float(kv[f"val_ppl_before.{tag}"])


def test_score_report_is_self_consistent(toy_run):
    kv = dict(line.split("=", 1) for line in (toy_run / "score.kv").read_text().splitlines())
    imps = []
    for tag in ("aa", "bb"):
        row = {k: float(kv[f"lang.{tag}.{k}"]) for k in ("delta_shared", "n_shared", "delta_exclusive", "n_exclusive")}
        imp = (row["delta_shared"] / row["n_shared"]) / (row["delta_exclusive"] / row["n_exclusive"])
        assert abs(imp - float(kv[f"lang.{tag}.imp"])) <= 1e-9 * max(1, abs(imp))
        imps.append(imp)
    assert abs(math.log1p(sum(imps) / 2) - float(kv["agnostic_score"])) <= 1e-9


def test_detect_is_idempotent(tmp_path):
    cfg = write_config(tmp_path)
    assert run("detect", "--config", cfg, "--out", tmp_path / "a") == EXIT_OK
    assert run("detect", "--config", cfg, "--out", tmp_path / "b") == EXIT_OK
    for name in ("sets/aa.neurons", "sets/bb.neurons", "detect_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_identical_corpora_give_identical_sets(tmp_path):
    same = {"synth": {"alphabet": "abcd", "min_len": 3, "max_len": 10, "seed": 9}}
    cfg = write_config(tmp_path, languages={"xx": same, "yy": same})
    assert run("detect", "--config", cfg) == EXIT_OK
    a = (tmp_path / "out" / "sets" / "xx.neurons").read_text()
    assert a == (tmp_path / "out" / "sets" / "yy.neurons").read_text()


def test_q_zero_gives_empty_sets(tmp_path):
    cfg = write_config(tmp_path)
    assert run("detect", "--config", cfg, "--criterion", "topq:0") == EXIT_OK
    summary = (tmp_path / "out" / "detect_summary.csv").read_text().splitlines()
    assert all(line.endswith(",empty") for line in summary[1:])
    found, _ = NeuronSet.load(tmp_path / "out" / "sets" / "aa.neurons")
    assert len(found) == 0


def test_three_language_shared_ratio_from_files(tmp_path):
    langs = dict(FAST["languages"])
    langs["cc"] = {"synth": {"alphabet": "mnop", "min_len": 3, "max_len": 10, "seed": 3}}
    cfg = write_config(tmp_path, languages=langs)
    assert run("detect", "--config", cfg) == EXIT_OK
    assert run("classify", "--config", cfg) == EXIT_OK
    sets = {t: NeuronSet.load(tmp_path / "out" / "sets" / f"{t}.neurons")[0] for t in langs}
    shared = sets["aa"] & sets["bb"] & sets["cc"]
    mean_ex = sum(len(s - shared) for s in sets.values()) / 3
    line = [ln for ln in (tmp_path / "out" / "profile.txt").read_text().splitlines() if ln.startswith("shared_ratio")]
    expect = shared_ratio(classify(sets))
    assert expect == len(shared) / mean_ex
    assert line == [f"shared_ratio\t{expect!r}"]


def test_classify_without_detect_is_precondition_error(tmp_path):
    assert run("classify", "--config", write_config(tmp_path)) == EXIT_PRECONDITION


def test_config_errors(tmp_path):
    assert run("detect", "--config", tmp_path / "nope.json") == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("detect", "--config", bad) == EXIT_CONFIG
    cfg = write_config(tmp_path)
    assert run("detect", "--config", cfg, "--criterion", "median:3") == EXIT_CONFIG
    assert run("train", "--config", cfg, "--strategy", "sideways") == EXIT_CONFIG
    assert run("detect", "--config", write_config(tmp_path, model={"path": "missing.nscp"})) == EXIT_CONFIG


def test_undefined_score_exit_code(tmp_path):
    # every language keeps the same set, so no exclusive neurons exist
    same = {"synth": {"alphabet": "abcd", "min_len": 3, "max_len": 10, "seed": 9}}
    cfg = write_config(tmp_path, languages={"xx": same, "yy": same})
    assert run("score", "--config", cfg) == EXIT_UNDEFINED
    assert "agnostic_score=undefined" in (tmp_path / "out" / "score.kv").read_text()
    assert run("train", "--config", cfg) == EXIT_UNDEFINED


def test_random_zero_leaves_weights(tmp_path):
    model = init_random(ModelConfig.from_dict(FAST["model"]["init"]), 3)
    from langneuron.container import save_model

    save_model(tmp_path / "m.nscp", model)
    cfg = write_config(tmp_path, model={"path": "m.nscp"})
    assert run("train", "--config", cfg, "--strategy", "random:0") == EXIT_OK
    assert (tmp_path / "out" / "trained.nscp").read_bytes() == (tmp_path / "m.nscp").read_bytes()
    assert load_model(tmp_path / "out" / "trained.nscp").config == model.config


def test_shared_override_runs_mask_check(tmp_path):
    cfg = write_config(tmp_path)
    assert run("train", "--config", cfg, "--strategy", "all") == EXIT_OK
    kv = (tmp_path / "out" / "train.kv").read_text()
    assert "strategy_source=override" in kv and "mask_check=pass" in kv


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    cfg = write_config(tmp_path, training={"learning_rate": 1e30, "steps": 5, "batch_size": 4})
    assert run("train", "--config", cfg, "--strategy", "all", "--criterion", "topq:1") == EXIT_DIVERGED


def test_ablate_writes_csv(tmp_path):
    cfg = write_config(tmp_path)
    assert run("detect", "--config", cfg) == EXIT_OK
    assert run("ablate", "--config", cfg) == EXIT_OK
    rows = (tmp_path / "out" / "ablation.csv").read_text().splitlines()
    assert rows[0] == "language,set,size,ppl_base,delta_ppl,seed" and len(rows) == 5
    assert run("ablate", "--config", cfg, "--set", tmp_path / "out" / "sets" / "aa.neurons") == EXIT_OK


def test_report_absent_markers(tmp_path):
    cfg = write_config(tmp_path)
    assert run("detect", "--config", cfg) == EXIT_OK
    assert run("report", "--out", tmp_path / "out") == EXIT_OK
    text = (tmp_path / "out" / "report.txt").read_text()
    assert "## score\nabsent" in text and "## training\nabsent" in text
    assert "score,status,absent" in (tmp_path / "out" / "summary.csv").read_text()


def test_report_on_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("report", "--out", tmp_path / "empty") == EXIT_PRECONDITION
    assert run("report", "--out", tmp_path / "missing") == EXIT_PRECONDITION


def test_seed_recorded_in_outputs(tmp_path):
    cfg = write_config(tmp_path)
    assert run("detect", "--config", cfg, "--seed", "42") == EXIT_OK
    header = (tmp_path / "out" / "sets" / "aa.neurons").read_text().splitlines()[0]
    assert "seed=42" in header
    assert Path(tmp_path / "out" / "detect_summary.csv").read_text().splitlines()[1].split(",")[7] == "42"
