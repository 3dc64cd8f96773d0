"""Time kernel grouping against the whole-grid arm across cloud sizes and fit log-log slopes."""
import argparse

from dgsf.bench import REFERENCE_N, bench_grouping, loglog_slope
from dgsf.grouping import KernelSpec


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--ns", type=int, nargs="+", default=[1000, 4000, 16000, REFERENCE_N])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--k-h", type=int, default=7)
    p.add_argument("--k-w", type=int, default=9)
    p.add_argument("--K", type=int, default=16)
    args = p.parse_args()
    spec = KernelSpec(args.k_h, args.k_w, args.K)
    reports = [bench_grouping(n, spec, args.repeats) for n in args.ns]
    print("n,height,width,kernel_ms,brute_ms,speedup,kernel_candidates,brute_candidates")
    for r in reports:
        print(f"{r.n_valid},{r.height},{r.width},{r.kernel_ms:.2f},{r.brute_ms:.2f},{r.speedup:.2f},"
              f"{r.kernel_candidates},{r.brute_candidates}")
    if len(reports) > 1:
        ns = [r.n_valid for r in reports]
        print(f"kernel time slope {loglog_slope(ns, [r.kernel_ms for r in reports]):.2f}, "
              f"whole-grid time slope {loglog_slope(ns, [r.brute_ms for r in reports]):.2f}")


if __name__ == "__main__":
    main()
