"""Compare the numba and numpy kernel backends.

Two parts: each fused kernel at the default model's shapes (after a warm-up
call so numba compile time is excluded), and one full training step of the
default model in a subprocess per backend, since the backend is fixed at
import from ``DEPPRUNE_KERNELS``.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--steps 5]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from depprune.kernels import get_backend

STEP_SCRIPT = """
import json, time
import numpy as np
from depprune import tensor as T
from depprune.kernels import BACKEND
from depprune.model import ModelConfig, init_model, next_token_loss
m = init_model(ModelConfig())
ids = (np.arange(4 * 129).reshape(4, 129) * 7) % 256 + 3
def step():
    with T.Tape():
        T.backward(next_token_loss(m, ids))
    m.zero_grad()
step()
t = time.perf_counter()
for _ in range({steps}):
    step()
print(json.dumps({{"backend": BACKEND, "seconds": (time.perf_counter() - t) / {steps}}}))
"""


def kernel_cases(rng):
    rows, d, f, bh, t = 512, 64, 172, 16, 128
    x = rng.normal(size=(rows, d))
    w = rng.normal(size=d)
    gy = rng.normal(size=(rows, d))
    s = rng.normal(size=(bh, t, t))
    allowed = np.tril(np.ones((t, t), dtype=bool))[None].repeat(bh, axis=0)
    g, u, gm = rng.normal(size=(rows, f)), rng.normal(size=(rows, f)), rng.normal(size=(rows, f))
    gp = rng.normal(size=(bh, t, t))

    def cases(k):
        _, inv = k.rmsnorm_fwd(x, w, 1e-6)
        p = k.softmax_fwd(s, allowed)
        _, sig = k.swiglu_fwd(g, u)
        return {
            "rmsnorm_fwd": lambda: k.rmsnorm_fwd(x, w, 1e-6),
            "rmsnorm_bwd": lambda: k.rmsnorm_bwd(gy, x, w, inv),
            "softmax_fwd": lambda: k.softmax_fwd(s, allowed),
            "softmax_bwd": lambda: k.softmax_bwd(gp, p),
            "swiglu_fwd": lambda: k.swiglu_fwd(g, u),
            "swiglu_bwd": lambda: k.swiglu_bwd(gm, g, u, sig),
        }

    return cases


def time_kernels(repeat):
    cases = kernel_cases(np.random.default_rng(0))
    out = {}
    for name in ("numpy", "numba"):
        try:
            k = get_backend(name)
        except ValueError:
            continue
        for op, fn in cases(k).items():
            fn()  # warm-up (numba compiles here)
            best = min(timeit.repeat(fn, number=1, repeat=repeat))
            out.setdefault(op, {})[name] = best
    return out


def time_steps(steps):
    out = {}
    for name in ("numpy", "numba"):
        env = dict(os.environ, DEPPRUNE_KERNELS=name)
        proc = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(steps=steps)], env=env,
                              capture_output=True, text=True)
        if proc.returncode == 0:
            out[name] = json.loads(proc.stdout.strip().splitlines()[-1])["seconds"]
        else:
            print(f"{name}: step benchmark failed\n{proc.stderr}", file=sys.stderr)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=50, help="timing repeats per kernel (best is kept)")
    ap.add_argument("--steps", type=int, default=5, help="training steps per backend")
    args = ap.parse_args()

    print(f"{'kernel':<14} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for op, t in time_kernels(args.repeat).items():
        npy, nb = t.get("numpy"), t.get("numba")
        speed = f"{npy / nb:8.2f}" if npy and nb else f"{'-':>8}"
        print(f"{op:<14} {npy * 1e3:10.3f} {(nb or float('nan')) * 1e3:10.3f} {speed}")
    steps = time_steps(args.steps)
    print()
    print("train step (default model, batch 4 x 128):")
    for name, sec in steps.items():
        print(f"  {name:<6} {sec * 1e3:9.1f} ms")
    if len(steps) == 2:
        print(f"  speedup {steps['numpy'] / steps['numba']:.2f}x")


if __name__ == "__main__":
    main()
