"""Numba loops vs their numpy twins, kernel by kernel, plus one network forward
per backend.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Kernel timings call ``.numba`` and ``.numpy`` directly, so one process covers
both. The forward pass goes through the dispatcher, so it runs once per
backend in a child process with DEPTHUP_BACKEND set.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from depthup.kernels import HAS_NUMBA
from depthup.kernels import calib as kc
from depthup.kernels import conv as kv
from depthup.kernels import flow as kf


def best_of(fn, args, repeat):
    fn(*args)  # compile / warm caches
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times) * 1e3


def cases(rng):
    xp = rng.standard_normal((4, 110, 194, 8)).astype(np.float32)
    cols = kv.im2col.numpy(xp, 3, 3, 2, 54, 96)
    dk = rng.standard_normal((3, 3, 8)).astype(np.float32)
    g = rng.standard_normal((4, 108, 192, 8)).astype(np.float32)
    x = rng.standard_normal((4, 108, 192, 16)).astype(np.float32)
    _, arg = kv.maxpool.numpy(x)
    gp = rng.standard_normal((4, 54, 96, 16)).astype(np.float32)
    img = rng.random((108, 192)) * 255
    field = rng.random((108, 192, 5))
    py, px = np.mgrid[0:108, 0:192].astype(np.float64)
    flow = rng.uniform(-3, 3, (108, 192, 2))
    depth = rng.integers(0, 5000, (108, 192)).astype(np.uint16)
    n = 20_000
    return [
        ("im2col stride 2", kv.im2col, (xp, 3, 3, 2, 54, 96)),
        ("col2im stride 2", kv.col2im, (cols, 110, 194, 2)),
        ("depthwise 3x3", kv.depthwise, (xp, dk, 108, 192)),
        ("depthwise grad input", kv.depthwise_grad_input, (g, dk, 110, 194)),
        ("depthwise grad kernel", kv.depthwise_grad_kernel, (xp, g, 3, 3)),
        ("maxpool 2x2", kv.maxpool, (x,)),
        ("maxpool grad", kv.maxpool_grad, (gp, arg, 108, 192)),
        ("separable correlation", kf.correlate_sep, (img, np.ones(11) / 11, np.ones(11) / 11)),
        ("bilinear sampling", kf.bilinear, (field, px + flow[..., 0], py + flow[..., 1])),
        ("flow update matrices", kf.update_matrices, (field, field[::-1].copy(), flow)),
        ("nearest depth warp", kf.warp_nearest, (depth, depth != 0, flow)),
        ("z-buffer splat", kc.zbuffer, (rng.integers(0, 192, n), rng.integers(0, 108, n),
                                        rng.uniform(500, 5000, n), 108, 192)),
    ]


FORWARD = """
import time, numpy as np
from depthup import model
from depthup.model import NetworkConfig
net = model.build(NetworkConfig(), seed=0)
rng = np.random.default_rng(0)
c = rng.random((1, 108, 192, 3), dtype=np.float32)
d = rng.random((1, 108, 192, 1), dtype=np.float32)
net.forward_batch(c, d, c)
ts = []
for _ in range({repeat}):
    t = time.perf_counter(); net.forward_batch(c, d, c); ts.append(time.perf_counter() - t)
print(min(ts) * 1e3)
"""


def forward_ms(backend, repeat):
    env = dict(os.environ, DEPTHUP_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", FORWARD.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, k, a in cases(rng):
        t_nb = best_of(k.numba, a, args.repeat)
        t_np = best_of(k.numpy, a, args.repeat)
        rows.append({"kernel": name, "numba_ms": t_nb, "numpy_ms": t_np})
        print(f"{name:<26}{t_nb:>10.2f}{t_np:>10.2f}{t_np / t_nb:>8.1f}x")
    fwd = {b: forward_ms(b, args.repeat) for b in ("numba", "numpy")}
    print(f"{'network forward 192x108':<26}{fwd['numba']:>10.2f}{fwd['numpy']:>10.2f}"
          f"{fwd['numpy'] / fwd['numba']:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "forward_ms": fwd, "cpus": os.cpu_count()}, fh, indent=2)


if __name__ == "__main__":
    main()
