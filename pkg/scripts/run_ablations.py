"""Warp-mode and fusion-mode ablations on synthetic scenes (fixed seeds)."""
import argparse
import logging

from dgsf.experiments import fusion_ablation, warp_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("which", choices=["warp", "fusion", "both"], nargs="?", default="both")
    p.add_argument("--steps", type=int, help="override the training budget")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    kw = {"steps": args.steps} if args.steps else {}
    if args.which in ("warp", "both"):
        for arm, epe in warp_ablation(**kw).epe.items():
            print(f"warp   {arm:10s} EPE3D {epe:.4f}")
    if args.which in ("fusion", "both"):
        for arm, epe in fusion_ablation(**kw).epe.items():
            print(f"fusion {arm:10s} EPE3D {epe:.4f}")


if __name__ == "__main__":
    main()
