import json
import os
import subprocess
import sys

import pytest

from langneuron import backend_name

SCRIPT = """
import json
from langneuron import backend_name, detect_language_neurons, init_random, ModelConfig, perplexity
from langneuron.corpus import SynthSpec, synth_language
model = init_random(ModelConfig(n_layers=2, d_model=16, n_heads=2, d_head=8, d_inter=32), 0)
corpus = synth_language(SynthSpec(b"abcdefgh", 6, 14, seed=1), 6, 24)
found = detect_language_neurons(model, corpus)
print(json.dumps({"backend": backend_name(), "set": [str(n) for n in found],
                  "ppl": perplexity(model, corpus)}))
"""


def run_with(flag):
    env = dict(os.environ)
    env.pop("LANGNEURON_DISABLE_NUMBA", None)
    if flag is not None:
        env["LANGNEURON_DISABLE_NUMBA"] = flag
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def test_default_backend_is_numba():
    assert backend_name() in ("numba", "numpy")
    assert run_with(None)["backend"] == "numba"


@pytest.mark.parametrize("flag", ["1", "true"])
def test_flag_selects_numpy(flag):
    assert run_with(flag)["backend"] == "numpy"


def test_backends_agree_end_to_end():
    a = run_with(None)
    b = run_with("1")
    assert a["set"] == b["set"]
    # matmul and softmax reduce in the same order on both paths
    assert a["ppl"] == pytest.approx(b["ppl"], rel=1e-6)
