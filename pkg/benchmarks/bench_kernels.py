"""Numba loop kernels vs. their numpy twins.

Run:  python3 benchmarks/bench_kernels.py [--repeat 20]

Each kernel is timed on toy-config shapes (batch 16, 8 frames, 8x8 grid) and
on a larger grid; the first numba call is excluded as compilation. Outputs
are checked to agree before timing. The last row times one full
forward+backward training step (batch 16, toy config) on each backend.
"""

import argparse
import time

import numpy as np

from stavl import _accel, kernels


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def cases(rng, B, T, h, w, d, c):
    x = rng.standard_normal((B, T, h, w, c))
    wt = rng.standard_normal((3, c, c))
    bt = rng.standard_normal(c)
    xd = rng.standard_normal((B, T, h, w, d))
    wd = rng.standard_normal((3, 3, 3, d))
    bd = rng.standard_normal(d)
    dyt = rng.standard_normal(x.shape)
    dyd = rng.standard_normal(xd.shape)
    g = rng.standard_normal((B, 179, 4 * 64))
    return {
        "tconv3 fwd": lambda: kernels.tconv3_forward(x, wt, bt),
        "tconv3 bwd": lambda: kernels.tconv3_backward(dyt, x, wt),
        "dwconv3 fwd": lambda: kernels.dwconv3_forward(xd, wd, bd),
        "dwconv3 bwd": lambda: kernels.dwconv3_backward(dyd, xd, wd),
        "gelu fwd": lambda: kernels.gelu_forward(g),
        "gelu bwd": lambda: kernels.gelu_backward(g, g),
    }


def check_agreement(fns):
    for name, fn in fns.items():
        _accel.set_backend("numba")
        a = fn()
        _accel.set_backend("numpy")
        b = fn()
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            if not np.allclose(u, v, rtol=1e-10, atol=1e-10):
                raise SystemExit(f"{name}: backends disagree")


def training_step():
    from stavl import toy_config
    from stavl.data import generate_samples
    from stavl.lm import TeacherStub
    from stavl.model import forward_loss, init_params, make_batch

    cfg = toy_config()
    store = init_params(cfg)
    batch = make_batch(generate_samples(16, "color,direction", seed=0), 0)
    teacher = TeacherStub.for_config(cfg)
    return lambda: forward_loss(store, cfg, batch, teacher)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    prev = _accel.backend()
    print(f"{'kernel':<14}{'shape':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    try:
        for shape in [(16, 8, 8, 8, 32, 8), (4, 8, 28, 28, 64, 16)]:
            fns = cases(rng, *shape)
            check_agreement(fns)
            for name, fn in fns.items():
                _accel.set_backend("numba")
                tn = _time(fn, args.repeat)
                _accel.set_backend("numpy")
                tp = _time(fn, args.repeat)
                label = "x".join(map(str, shape[:4])) + f" d{shape[4]}"
                print(f"{name:<14}{label:<22}{tn:>10.3f}{tp:>10.3f}{tp / tn:>8.1f}x")
        step = training_step()
        _accel.set_backend("numba")
        tn = _time(step, max(3, args.repeat // 4))
        _accel.set_backend("numpy")
        tp = _time(step, max(3, args.repeat // 4))
        print(f"{'train step':<14}{'toy, batch 16':<22}{tn:>10.3f}{tp:>10.3f}{tp / tn:>8.1f}x")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
