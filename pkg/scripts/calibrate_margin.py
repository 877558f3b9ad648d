"""Run the standard synthetic study once and print the ConvLSTM margins.

The acceptance test pins the persistence margin observed here minus a safety
factor. Usage: python scripts/calibrate_margin.py [--kinds convlstm cnn persistence]
"""
import argparse
import dataclasses
import time

import numpy as np

from traffic_s2s.pipeline import StudyConfig, run_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kinds", nargs="+", default=["convlstm", "cnn", "persistence"])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--train-stride", type=int, default=6)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--batch-size", type=int, default=16)
    args = ap.parse_args()

    cfg = StudyConfig(kinds=tuple(args.kinds), train_stride=args.train_stride, preset=args.preset)
    cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    t0 = time.perf_counter()
    res = run_study(cfg, log=print)
    print(f"total {time.perf_counter() - t0:.0f}s")
    for kind, rep in res.reports.items():
        print(f"{kind:12s} MAE {rep.mae:.6g}  PSNR {rep.psnr:.3f}  SSIM {rep.ssim:.4f}  "
              f"NMAE svc {np.nanmean(rep.nmae_service.values):.4f} cat {np.nanmean(rep.nmae_category.values):.4f}")
        print("   steps", " ".join(f"{v:.4g}" for v in rep.mae_steps))
    if "convlstm" in res.reports and "persistence" in res.reports:
        gain = 1 - res.reports["convlstm"].mae / res.reports["persistence"].mae
        print(f"convlstm improvement over persistence: {gain:.2%}")


if __name__ == "__main__":
    main()
