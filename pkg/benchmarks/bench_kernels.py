"""Compare the numba and numpy gate kernels, alone and inside a full backward pass.

Usage::

    python3 benchmarks/bench_kernels.py [--size 40000] [--repeat 50]

Each backend runs in its own subprocess because the backend is chosen at
import time from ``TRNN_DISABLE_NUMBA``.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _best(fn, repeat):
    fn()  # warm-up, includes any compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * min(times)


def measure(size: int, repeat: int) -> dict:
    import numpy as np

    from trnn import _kernels as K
    from trnn.backprop import backprop_series
    from trnn.cells import init_params, run_series

    rng = np.random.default_rng(0)
    a = [rng.standard_normal(size) for _ in range(8)]
    F, I, O, Chat, C, tanhC, _ = K.lstm_forward(a[0], a[1], a[2], a[3], a[4])
    Z, Hhat, R = K.sigmoid(a[5]), np.tanh(a[6]), K.sigmoid(a[7])
    out = {
        "backend": "numba" if K.USE_NUMBA else "numpy",
        "lstm_backward_ms": _best(lambda: K.lstm_backward(a[0], a[1], F, I, O, Chat, a[4], tanhC), repeat),
        "gru_backward_ms": _best(lambda: (K.gru_backward_update(a[0], Z, Hhat, a[1]),
                                          K.gru_backward_reset(a[2], R, a[1])), repeat),
        "lstm_forward_ms": _best(lambda: K.lstm_forward(a[0], a[1], a[2], a[3], a[4]), repeat),
    }
    # one chunk of the large replication case: 4 windows of 7 steps
    model = init_params("tlstm", (25, 25, 4), (50, 50, 4), seed=0)
    xs = [rng.standard_normal((4, 25, 25, 4)) for _ in range(7)]
    outs, tapes = run_series(model, xs)
    adj = [None] * 6 + [np.ones_like(outs[-1])]
    out["tlstm_bptt_chunk_ms"] = _best(lambda: backprop_series(model, tapes, adj), max(3, repeat // 10))
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=40_000, help="elements per kernel call")
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args(argv)
    if args.child:
        print(json.dumps(measure(args.size, args.repeat)))
        return 0
    rows = []
    for disabled in ("0", "1"):
        env = {**os.environ, "TRNN_DISABLE_NUMBA": disabled}
        proc = subprocess.run(
            [sys.executable, __file__, "--child", "--size", str(args.size), "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True, check=True,
        )
        rows.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    keys = [k for k in rows[0] if k != "backend"]
    header = "".join(f"{r['backend']:>12}" for r in rows)
    print(f"{'metric (best of runs, ms)':<28}{header}{'speedup':>10}")
    for k in keys:
        nb, npy = rows[0][k], rows[1][k]
        print(f"{k:<28}{nb:>12.3f}{npy:>12.3f}{npy / nb:>9.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
