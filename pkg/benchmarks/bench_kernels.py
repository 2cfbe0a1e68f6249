"""Numba vs NumPy timings for the hot kernels, plus one end-to-end pre-training
step under each backend.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--skip-e2e]

Kernel timings call the ``*_np`` and ``*_nb`` functions directly, so both
paths are measured in one process. The end-to-end step runs in subprocesses
with ``MAE_LAB_NUMBA`` set to 1 and 0, which is how the backend is chosen in
normal use. Shapes match the desk-scale model (batch 8, 128 patches, width
64, 4 heads).
"""

import argparse
import os
import subprocess
import sys
import textwrap
import time

import numpy as np

from mae_lab import kernels


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _k(name, path):
    # numpy variants are public (``*_np``); numba ones are private (``_*_nb``)
    return getattr(kernels, f"{name}_np" if path == "np" else f"_{name}_nb")


def kernel_cases(rng):
    rows, width = 8 * 128, 64
    x = rng.standard_normal((rows, width))
    g = rng.standard_normal(width)
    b = rng.standard_normal(width)
    dy = rng.standard_normal((rows, width))
    _, xhat, rstd = kernels.layernorm_fwd_np(x, g, b, 1e-6)
    scores = rng.standard_normal((8 * 4 * 128, 128))
    sm = kernels.softmax_fwd_np(scores)
    dsm = rng.standard_normal(scores.shape)
    hidden = rng.standard_normal((8, 128, 128))
    dh = rng.standard_normal(hidden.shape)
    idx = rng.integers(0, 128, size=4096)
    src = rng.standard_normal((4096, 64))
    patches = rng.standard_normal((128, 256))
    scores1d = rng.random(20000).round(3)
    return [
        ("layernorm fwd", lambda k: _k("layernorm_fwd", k)(x, g, b, 1e-6)),
        ("layernorm bwd", lambda k: _k("layernorm_bwd", k)(dy, xhat, rstd, g)),
        ("softmax fwd", lambda k: _k("softmax_fwd", k)(scores)),
        ("softmax bwd", lambda k: _k("softmax_bwd", k)(sm, dsm)),
        ("gelu fwd", lambda k: _k("gelu_fwd", k)(hidden)),
        ("gelu bwd", lambda k: _k("gelu_bwd", k)(hidden, dh)),
        ("scatter-add rows", lambda k: _k("scatter_add_rows", k)(np.zeros((128, 64)), idx, src)),
        ("patch stats", lambda k: _k("patch_stats", k)(patches)),
        ("midrank", lambda k: _k("midrank", k)(scores1d)),
    ]


E2E = textwrap.dedent("""
    import time, numpy as np
    from mae_lab import mae, masking, kernels
    from mae_lab.tensorgrad import backward
    cfg = mae.MaeConfig()
    m = mae.MaeModel.init(cfg)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((cfg.batch_size, cfg.n_patches, cfg.patch_dim))
    plans = mae.make_plans(cfg, x.var(axis=2), rng)
    params = list(m.params.values())
    step = lambda: backward(mae.loss_on_batch(m, x, plans, cfg), params)
    step()
    ts = []
    for _ in range({repeat}):
        t0 = time.perf_counter(); step(); ts.append(time.perf_counter() - t0)
    print(kernels.BACKEND, min(ts))
""")


def e2e(repeat):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, MAE_LAB_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba unavailable (or MAE_LAB_NUMBA=0); nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}")
    for name, call in kernel_cases(rng):
        t_np = best_of(lambda: call("np"), args.repeat)
        t_nb = best_of(lambda: call("nb"), args.repeat)
        print(f"{name:<18}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>9.2f}x")
    if not args.skip_e2e:
        res = e2e(max(3, args.repeat // 4))
        print(f"\npre-training step (forward + backward, batch {8}):")
        for backend, secs in res.items():
            print(f"  {backend:<6} {1e3 * secs:8.1f} ms")
        if "numpy" in res and "numba" in res:
            print(f"  speed-up {res['numpy'] / res['numba']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
