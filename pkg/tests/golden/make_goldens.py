"""Regenerate the golden artifacts for the bundled toy run.

Set files come from a brute-force pipeline that scores every neuron with
``sequential_oracle``; the score and report goldens come from a reference
CLI run. Usage: python tests/golden/make_goldens.py
"""

import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from langneuron.cli import RunConfig
from langneuron.detect import ImpactTable, oracle_impacts, select_neurons

HERE = Path(__file__).resolve().parent
ROOT = HERE.parents[1]
TOY = ROOT / "configs" / "toy.json"


def oracle_sets(cfg: RunConfig):
    model = cfg.build_model()
    out = {}
    for tag, corpus in cfg.corpora(model).items():
        rows = [oracle_impacts(model, s, cfg.detection.scope) for s in corpus.sentences]
        tables = [ImpactTable(layer, site, np.stack([r[(layer, site)] for r in rows])) for (layer, site) in rows[0]]
        out[tag] = select_neurons(model.config, tables, cfg.detection)
    return model, out


def main() -> None:
    cfg = RunConfig.load(TOY)
    model, sets = oracle_sets(cfg)
    (HERE / "sets").mkdir(exist_ok=True)
    for tag, found in sets.items():
        (HERE / "sets" / f"{tag}.neurons").write_text(found.dumps(model.config.hash(), cfg.seed))

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "toy"
        for cmd in ("detect", "score", "train"):
            subprocess.run(
                [sys.executable, "-m", "langneuron.cli", cmd, "--config", str(TOY), "--out", str(out)], check=True
            )
        subprocess.run([sys.executable, "-m", "langneuron.cli", "report", "--out", str(out)], check=True,
                       stdout=subprocess.DEVNULL)
        for name in ("score.kv", "report.txt"):
            shutil.copy(out / name, HERE / name)


if __name__ == "__main__":
    main()
