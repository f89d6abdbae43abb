"""Time the numba and pure-numpy kernel paths side by side.

Each backend runs in its own interpreter because the choice is read from
A2NET_BACKEND at import time. Usage::

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from a2net import _backend, kernels as K
from a2net.model import A2Net, ModelConfig
from a2net.trainer import TrainConfig, compute_terms
from a2net import autodiff as ad, objectives as obj

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)

def best(fn):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter(); fn(); times.append(time.perf_counter() - t)
    return min(times)

x = rng.normal(size=(64, 16, 8, 8)); w = rng.normal(size=(32, 16, 3, 3))
y = K.conv2d_forward(x, w, 1, 1)
out = {"backend": "numba" if _backend.USE_NUMBA else "numpy"}
out["conv_forward_s"] = best(lambda: K.conv2d_forward(x, w, 1, 1))
out["conv_grad_input_s"] = best(lambda: K.conv2d_grad_input(y, w, (8, 8), 1, 1))
out["conv_grad_weight_s"] = best(lambda: K.conv2d_grad_weight(y, x, (3, 3), 1, 1))

model = A2Net(ModelConfig())
imgs = rng.random((400, 3, 16, 16))
model.data_init(imgs[:64])
out["encode_400_s"] = best(lambda: model.encode(imgs))

Z = model.encode(imgs).astype(float)
S = np.where(rng.random((16, 400)) < 0.2, 1.0, -1.0)
weights = TrainConfig().weights(12)
def step():
    terms = compute_terms(model, imgs[:16], Z, S, obj.TERM_NAMES, 12)
    loss = obj.total_loss(terms, weights)
    model.zero_grad(); ad.backward(loss)
out["train_step_s"] = best(step)

codes = rng.integers(0, 2**48, size=(1_000_000, 1), dtype=np.uint64)
q = codes[0]
t = best(lambda: K.hamming_scan(codes, q))
out["hamming_48bit_per_s"] = len(codes) / t
print(json.dumps(out))
"""


def run(backend, repeat):
    env = dict(os.environ, A2NET_BACKEND=backend)
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True)
    if res.returncode:
        sys.exit(res.stderr)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    rows = [run(b, a.repeat) for b in ("numba", "numpy")]
    if rows[0]["backend"] != "numba":
        print("numba is not installed; both rows use numpy")
    keys = [k for k in rows[0] if k != "backend"]
    print(f"{'metric':<22}{'numba':>14}{'numpy':>14}{'speedup':>10}")
    for k in keys:
        a_, b_ = rows[0][k], rows[1][k]
        speed = a_ / b_ if k.endswith("per_s") else b_ / a_
        print(f"{k:<22}{a_:>14.6g}{b_:>14.6g}{speed:>9.2f}x")


if __name__ == "__main__":
    main()
