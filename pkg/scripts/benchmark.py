"""Time one training batch and one prediction pass per model kind.

Usage: python scripts/benchmark.py [--preset desk] [--batch 32] [--repeats 3]
"""
import argparse
import time

import numpy as np

from traffic_s2s.baselines import KINDS, build_model


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--predict-windows", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--grid", type=int, nargs=2, default=(6, 6))
    args = ap.parse_args()

    dims = dict(t_in=12, horizon=12, grid_shape=tuple(args.grid), n_services=8, seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(args.batch, 12, 8, *args.grid))
    y = rng.normal(size=(args.batch, 12, 8, *args.grid))
    xp = rng.normal(size=(args.predict_windows, 12, 8, *args.grid))
    print(f"{'model':12s} {'params':>9s} {'train batch s':>14s} {'predict s':>10s}")
    for kind in KINDS:
        model = build_model(kind, preset=args.preset, **dims)
        step = (best_of(lambda: model.loss_and_grads(x, y, 0.5, rng), args.repeats)
                if model.trainable else float("nan"))
        pred = best_of(lambda: model.predict(xp), args.repeats)
        print(f"{kind:12s} {model.n_params():9d} {step:14.3f} {pred:10.3f}")


if __name__ == "__main__":
    main()
