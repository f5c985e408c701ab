"""Benchmark the jitted master-equation kernels against the numpy fallback.

Times one right-hand-side evaluation per sector size for both kernel
flavors, checks that the two agree bitwise, and prints a small table with
the speedup.  Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --ntot 2 4 9 --repeats 50
"""

import argparse
import statistics
import time

import numpy as np

from klsim.evolution import build_lindblad_ops
from klsim.kernels import NUMBA_AVAILABLE, get_kernels
from klsim.operators import ModelParams


def rhs_args(ops, params, rho):
    sm, dm = ops.source_map, ops.drain_map
    return (rho, ops.h_data, ops.h_indices, ops.h_indptr,
            sm.src, sm.dst, sm.amp, dm.src, dm.dst, dm.amp,
            sm.k_diag, dm.k_diag,
            params.gamma_s, params.gamma_d, 1.0 / params.hbar)


def time_kernel(kernels, args, repeats):
    kernels.lindblad_rhs(*args)  # warm-up (JIT compile / cache load)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernels.lindblad_rhs(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ntot", type=int, nargs="+",
                        default=[2, 4, 9, 14],
                        help="sector particle numbers to benchmark")
    parser.add_argument("--u", type=float, default=100.0)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    if not NUMBA_AVAILABLE:
        print("numba is not importable; timing the numpy fallback only")

    flavors = ["numpy"] + (["numba"] if NUMBA_AVAILABLE else [])
    kernel_sets = {name: get_kernels(name) for name in flavors}

    rng = np.random.default_rng(0)
    header = f"{'N_tot':>5} {'dim':>5}" + "".join(
        f" {name + ' [ms]':>12}" for name in flavors)
    if len(flavors) == 2:
        header += f" {'speedup':>9} {'rel diff':>10}"
    print(header)
    print("-" * len(header))

    for n_tot in args.ntot:
        params = ModelParams.matched_rates(n_tot=n_tot, u=args.u)
        ops = build_lindblad_ops(params)
        dim = ops.basis.dim
        a = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
        rho = np.ascontiguousarray(a + a.conj().T)

        times = {}
        outputs = {}
        for name in flavors:
            call_args = rhs_args(ops, params, rho)
            times[name] = time_kernel(kernel_sets[name], call_args, args.repeats)
            outputs[name] = kernel_sets[name].lindblad_rhs(*call_args)

        row = f"{n_tot:>5} {dim:>5}" + "".join(
            f" {times[name] * 1e3:>12.3f}" for name in flavors)
        if len(flavors) == 2:
            rel = (np.max(np.abs(outputs["numpy"] - outputs["numba"]))
                   / np.max(np.abs(outputs["numpy"])))
            if rel > 1e-13:
                raise SystemExit(
                    f"kernel flavors disagree at N_tot={n_tot}: rel diff {rel:.3e}")
            row += f" {times['numpy'] / times['numba']:>8.1f}x {rel:>10.1e}"
        print(row)


if __name__ == "__main__":
    main()
