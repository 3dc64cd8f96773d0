"""Train the default network on small synthetic scenes and print the loss trace."""
import argparse
import logging

from dgsf.experiments import ToyRun, toy_training
from dgsf.network import write_trace


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="write step,loss CSV here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)
    res = toy_training(ToyRun(n_scenes=args.scenes, steps=args.steps, step_size=args.lr, seed=args.seed))
    print(f"loss {res.trace[0]:.5f} -> {res.trace[-1]:.5f}")
    print(f"EPE3D {res.epe_initial:.5f} -> {res.epe_final:.5f}")
    if args.trace:
        write_trace(args.trace, res.trace)


if __name__ == "__main__":
    main()
