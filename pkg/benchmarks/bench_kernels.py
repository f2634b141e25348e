"""Numba vs numpy timings for the row kernels, plus an optional end-to-end step timing.

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --e2e      # also time pretraining steps per backend

Each kernel pair is first checked for agreement (max abs difference) so the
timings compare equivalent code.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mapre import kernels as K
from mapre._accel import HAS_NUMBA

SHAPES = {"attention": (4 * 40, 40), "hidden": (40, 32), "ffn": (40, 64), "large": (4096, 256)}


def _cases(rng, shape):
    x = rng.normal(size=shape)
    g = rng.normal(size=shape)
    gain = rng.normal(size=shape[1])
    bias = rng.normal(size=shape[1])
    y = K.np_softmax_rows(x)
    logp = K.np_log_softmax_rows(x)
    _, xhat, rstd = K.np_layer_norm_rows(x, gain, bias, 1e-5)
    return {
        "softmax": ((x,), K.np_softmax_rows, K.nb_softmax_rows),
        "log_softmax": ((x,), K.np_log_softmax_rows, K.nb_log_softmax_rows),
        "softmax_bw": ((y, g), K.np_softmax_rows_backward, K.nb_softmax_rows_backward),
        "log_softmax_bw": ((logp, g), K.np_log_softmax_rows_backward, K.nb_log_softmax_rows_backward),
        "layer_norm": ((x, gain, bias, 1e-5), K.np_layer_norm_rows, K.nb_layer_norm_rows),
        "layer_norm_bw": ((g, xhat, rstd, gain), K.np_layer_norm_rows_backward, K.nb_layer_norm_rows_backward),
        "gelu": ((x,), K.np_gelu, K.nb_gelu),
        "gelu_bw": ((x, g), K.np_gelu_backward, K.nb_gelu_backward),
    }


def _max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_max_diff(p, q) for p, q in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _best(fn, args, number) -> float:
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=5)) / number


def bench_kernels(seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for shape_name, shape in SHAPES.items():
        number = 20 if shape_name == "large" else 2000
        for name, (args, f_np, f_nb) in _cases(rng, shape).items():
            f_nb(*args)  # compile outside the timed region
            diff = _max_diff(f_np(*args), f_nb(*args))
            t_np = _best(f_np, args, number)
            t_nb = _best(f_nb, args, number)
            rows.append({"kernel": name, "shape": shape_name, "rows_x_cols": list(shape), "numpy_us": t_np * 1e6,
                         "numba_us": t_nb * 1e6, "speedup": t_np / t_nb, "max_abs_diff": diff})
    return rows


_E2E = """
import time, numpy as np
from mapre.corpus import generate_corpus
from mapre.encoder import EncoderConfig
from mapre.kernels import BACKEND
from mapre.training.model import MapREModel
from mapre.training.pretrain import PretrainConfig, pretrain
kg, inst, vocab = generate_corpus(12, 10, 4, 128, seed=0, max_filler=1)
model = MapREModel(EncoderConfig(vocab_size=len(vocab)), vocab, seed=0)
pretrain(model, inst, kg.catalog, PretrainConfig(steps=3, warmup_steps=1))
t = time.perf_counter()
pretrain(model, inst, kg.catalog, PretrainConfig(steps={steps}, warmup_steps=1))
print(BACKEND, (time.perf_counter() - t) / {steps})
"""


def bench_end_to_end(steps: int = 20) -> dict:
    out = {}
    for disable in ("1", "0"):
        env = dict(os.environ, MAPRE_DISABLE_NUMBA=disable)
        res = subprocess.run([sys.executable, "-c", _E2E.format(steps=steps)], env=env, capture_output=True,
                             text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--e2e", action="store_true", help="also time full pretraining steps per backend")
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args()
    if not HAS_NUMBA:
        print("numba unavailable or disabled; nothing to compare", file=sys.stderr)
        sys.exit(1)
    rows = bench_kernels()
    e2e = bench_end_to_end(args.steps) if args.e2e else None
    if args.json:
        print(json.dumps({"kernels": rows, "pretrain_step_seconds": e2e}, indent=2))
        return
    print(f"{'kernel':<16}{'shape':<11}{'numpy us':>11}{'numba us':>11}{'speedup':>9}{'max|diff|':>11}")
    for r in rows:
        print(f"{r['kernel']:<16}{r['shape']:<11}{r['numpy_us']:>11.2f}{r['numba_us']:>11.2f}"
              f"{r['speedup']:>9.2f}{r['max_abs_diff']:>11.1e}")
    if e2e:
        print("pretraining step (s): " + ", ".join(f"{k} {v:.4f}" for k, v in sorted(e2e.items())))


if __name__ == "__main__":
    main()
