"""Time the numba kernels against their pure-numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Kernel timings call the ``*_numba`` / ``*_numpy`` functions directly on the
same inputs. The end-to-end rows run full detection in a subprocess per
backend, switched with LANGNEURON_DISABLE_NUMBA.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from langneuron import kernels

E2E = """
import time
from langneuron import ModelConfig, init_random, detect_language_neurons
from langneuron.corpus import SynthSpec, synth_language
model = init_random(ModelConfig(n_layers=2, d_model=64, n_heads=4, d_head=16, d_inter=128, max_seq_len=64), 0)
corpus = synth_language(SynthSpec(b"abcdefgh", 24, 60, seed=1), 20, 64)
detect_language_neurons(model, corpus.sentences[:1])  # warm-up, JIT
t = time.perf_counter()
detect_language_neurons(model, corpus)
print(time.perf_counter() - t)
"""


def cases(rng, l, d_model, d_head, d_inter):
    f32 = lambda *shape: rng.standard_normal(shape).astype(np.float32)  # noqa: E731
    s = f32(l, l)
    attn = kernels.softmax_rows_numpy(s, True)
    return {
        "matmul": ((f32(l, d_model), f32(d_model, d_inter)), {}),
        "softmax_rows": ((s, True), {}),
        "silu": ((f32(l, d_inter),), {}),
        "rmsnorm_rows": ((f32(l, d_model), f32(d_model), 1e-5), {}),
        "ffn_impacts": ((f32(l, d_inter), f32(d_inter, d_model)), {}),
        "attn_v_impacts": ((attn, f32(l, d_head)), {}),
        "attn_qk_impacts": ((f32(l, d_head), f32(l, d_head), f32(l, d_head), d_head**-0.5, True), {}),
    }


def bench(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for shape in ((16, 16, 8, 32), (64, 64, 16, 256)):
        for name, (args, _) in cases(rng, *shape).items():
            nb = getattr(kernels, f"{name}_numba")
            npy = getattr(kernels, f"{name}_numpy")
            nb(*args)  # compile
            t_nb = min(timeit.repeat(lambda: nb(*args), number=1, repeat=repeat))
            t_np = min(timeit.repeat(lambda: npy(*args), number=1, repeat=repeat))
            rows.append({"kernel": name, "l": shape[0], "numba_us": t_nb * 1e6, "numpy_us": t_np * 1e6})
    return rows


def end_to_end():
    out = {}
    for backend, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, LANGNEURON_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        out[backend] = float(res.stdout.strip().splitlines()[-1])
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()

    rows = bench(args.repeat)
    print(f"{'kernel':<18}{'l':>5}{'numba us':>12}{'numpy us':>12}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<18}{r['l']:>5}{r['numba_us']:>12.1f}{r['numpy_us']:>12.1f}"
              f"{r['numpy_us'] / r['numba_us']:>9.2f}")
    result = {"kernels": rows}
    if not args.skip_e2e:
        e2e = end_to_end()
        result["detect_seconds"] = e2e
        print(f"\ndetection, 20 sentences, d_model 64: numba {e2e['numba']:.2f}s  numpy {e2e['numpy']:.2f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2)


if __name__ == "__main__":
    main()
