"""Compare the numba and numpy kernel paths on desk-sized inputs.

    python benchmarks/bench_kernels.py            # per-kernel table
    python benchmarks/bench_kernels.py --e2e      # also time a training step under each backend

Each kernel is called once before timing so JIT compilation is excluded.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ccvqa import _kernels as K


def cases(rng):
    frame = rng.random((32 * 32, 3))
    hists = rng.random((64, 512))
    att = rng.normal(size=(8 * 4 * 17, 17))
    tok = rng.normal(size=(8 * 4 * 17, 32))
    hid = rng.normal(size=(8 * 4 * 17, 128))
    sm = K.np_softmax_rows(att)
    xhat, rstd = K.np_layer_norm_rows(tok, 1e-5)
    return {
        "rgb_histogram": (frame,),
        "l1_cdist": (hists, hists[:8]),
        "softmax_rows": (att,),
        "softmax_rows_backward": (sm, rng.normal(size=att.shape)),
        "layer_norm_rows": (tok, 1e-5),
        "layer_norm_rows_backward": (xhat, rstd, rng.normal(size=tok.shape)),
        "gelu": (hid,),
        "gelu_backward": (hid, rng.normal(size=hid.shape)),
    }


def bench(fn, args, repeat=5):
    fn(*args)
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def e2e_step_seconds(disable_numba: bool) -> float:
    code = (
        "import time, numpy as np\n"
        "from ccvqa import tensor as T\n"
        "from ccvqa.config import ModelConfig\n"
        "from ccvqa.fusion import CCVQA, qa_loss\n"
        "from ccvqa.target_encoders import Vocabulary\n"
        "rng = np.random.default_rng(0)\n"
        "ans = ['red','green','blue','yellow','magenta','circle','square','triangle']\n"
        "vocab = Vocabulary.build(['what color is the shape', 'question answer'] + ans)\n"
        "m = CCVQA(ModelConfig(), ans, vocab)\n"
        "b = m.make_batch(rng.random((8,4,32,32,3)), rng.random((8,1,32,32,3)), ['what color is the shape']*8, rng.integers(0,8,8))\n"
        "def step():\n"
        "    m.zero_grad(); T.backward(qa_loss(m(b)[0], b.targets))\n"
        "step()\n"
        "t = time.perf_counter()\n"
        "for _ in range(5): step()\n"
        "print((time.perf_counter() - t) / 5)\n"
    )
    env = dict(os.environ, CCVQA_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--e2e", action="store_true", help="time a full forward/backward step per backend")
    ap.add_argument("--json", action="store_true", help="emit JSON lines instead of a table")
    args = ap.parse_args(argv)

    if not K.NUMBA_KERNELS:
        print("numba unavailable (or disabled); nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    for name, inputs in cases(rng).items():
        t_np = bench(K.NUMPY_KERNELS[name], inputs)
        t_nb = bench(K.NUMBA_KERNELS[name], inputs)
        rows.append({"kernel": name, "numpy_us": t_np * 1e6, "numba_us": t_nb * 1e6, "speedup": t_np / t_nb})
    if args.e2e:
        t_np, t_nb = e2e_step_seconds(True), e2e_step_seconds(False)
        rows.append({"kernel": "train_step(B=8)", "numpy_us": t_np * 1e6, "numba_us": t_nb * 1e6,
                     "speedup": t_np / t_nb})

    if args.json:
        for r in rows:
            print(json.dumps(r))
        return 0
    print(f"{'kernel':<26} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<26} {r['numpy_us']:>12.1f} {r['numba_us']:>12.1f} {r['speedup']:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
