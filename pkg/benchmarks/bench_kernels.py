"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on identical inputs under both backends; the table reports
the best-of-N wall time per call and the speed-up. A short end-to-end joint
training step is timed in a subprocess per backend, since the backend is
chosen at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from psst import _kernels_py as py

try:
    from psst import _kernels as cy
except ImportError:
    cy = None

STEP_SNIPPET = """
import time, numpy as np
from psst.world import generate_world
from psst.experiment import RunConfig, WorldContext, joint_step
from psst.agents import SpeakerParams, ListenerParams
w = generate_world(); ctx = WorldContext(w); cfg = RunConfig()
rng = np.random.default_rng(0)
sp = SpeakerParams.init(cfg.dims(w), rng); li = ListenerParams.init(cfg.dims(w), rng)
scenes = w.split("train")[:cfg.batch_size]
joint_step(ctx, sp, li, scenes, cfg, rng)
t = time.perf_counter()
for _ in range({steps}):
    joint_step(ctx, sp, li, scenes, cfg, rng)
print((time.perf_counter() - t) / {steps})
"""


def gru_inputs(batch, hidden, rng):
    arrays = [np.ascontiguousarray(rng.normal(size=(batch, hidden))) for _ in range(5)]
    mask = (rng.uniform(size=batch) < 0.8).astype(np.float64)
    return arrays, mask


def cider_inputs(n, rng):
    refs = [[list(rng.integers(3, 40, size=rng.integers(3, 8))) for _ in range(5)] for _ in range(n)]
    cands = [list(rng.integers(3, 40, size=rng.integers(2, 8))) for _ in range(n)]
    keys = sorted({py.ngram_id(r, i, k) for rs in refs for r in rs for k in range(1, 5) for i in range(len(r) - k + 1)})
    idf = rng.uniform(0.1, 3.0, size=len(keys))
    return np.array(keys, dtype=np.int64), idf, cands, refs


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    (az, ar, xn, hn, h), mask = gru_inputs(32, 32, rng)
    g = rng.normal(size=h.shape)
    keys, idf, cands, refs = cider_inputs(32, rng)
    rows = []
    for name, make in (
        ("gru_gates_forward 32x32", lambda m: lambda: m.gru_gates_forward(az, ar, xn, hn, h, mask)),
        ("gru_gates_backward 32x32", lambda m: _backward(m, az, ar, xn, hn, h, mask, g)),
        ("cider score_many 32x5 refs", lambda m: _cider(m, keys, idf, cands, refs)),
    ):
        t_py = best(make(py), repeat, 200 if "gru" in name else 5)
        t_cy = best(make(cy), repeat, 200 if "gru" in name else 5) if cy else float("nan")
        rows.append((name, t_py, t_cy))
    return rows


def _backward(m, az, ar, xn, hn, h, mask, g):
    z, r, n, _ = m.gru_gates_forward(az, ar, xn, hn, h, mask)
    return lambda: m.gru_gates_backward(g, z, r, n, hn, h, mask)


def _cider(m, keys, idf, cands, refs):
    scorer = m.CiderScorer(keys, idf, 3.0)
    return lambda: scorer.score_many(cands, refs)


def step_time(pure, steps):
    env = dict(os.environ)
    if pure:
        env["PSST_PURE_PYTHON"] = "1"
    else:
        env.pop("PSST_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--steps", type=int, default=10, help="joint steps timed end to end")
    args = parser.parse_args(argv)
    if cy is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':<30}{'python (us)':>14}{'cython (us)':>14}{'speed-up':>10}")
    for name, t_py, t_cy in kernel_table(args.repeat):
        print(f"{name:<30}{t_py * 1e6:>14.1f}{t_cy * 1e6:>14.1f}{t_py / t_cy:>9.1f}x")
    t_py = step_time(True, args.steps)
    t_cy = step_time(False, args.steps) if cy else float("nan")
    print(f"{'joint_step (default config)':<30}{t_py * 1e6:>14.0f}{t_cy * 1e6:>14.0f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
