"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from signtie import kernels


def _problem(rng, T, N):
    a = rng.uniform(0.1, 0.9, size=N)
    return rng.normal(-20, 5, size=(T, N)), np.log(a), np.log1p(-a)


def cases(rng):
    emis, ls, lf = _problem(rng, 200, 5)
    U, S, T = 400, 5, 60
    b_emis = rng.normal(-20, 5, size=(U, T, S))
    b_ns = rng.integers(3, S + 1, size=U)
    a = rng.uniform(0.1, 0.9, size=(U, S))
    step = (rng.normal(-50, 5, size=(2500, 3)), rng.integers(0, 10, size=(2500, 3)),
            rng.normal(-50, 5, size=2500), rng.integers(0, 10, size=2500),
            rng.normal(-20, 5, size=(2500, 3)), np.log(a[:1, :3].repeat(2500, 0)),
            np.log1p(-a[:1, :3].repeat(2500, 0)), np.full(2500, 3))
    return {
        "viterbi_lr T=200 N=5": lambda m: m.viterbi_lr(emis, ls, lf),
        "viterbi_lr_batch U=400 T=60": lambda m: m.viterbi_lr_batch(b_emis, b_ns, np.log(a), np.log1p(-a)),
        "forward_backward_lr T=200 N=5": lambda m: m.forward_backward_lr(emis, ls, lf),
        "lr_step U=2500 S=3": lambda m: m.lr_step(*step),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; run `python setup.py build_ext --inplace` first")
    work = cases(np.random.default_rng(0))
    names = list(backends)
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in work.items():
        best = {}
        for n in names:
            mod = backends[n]
            loops = 3
            best[n] = min(timeit.repeat(lambda: fn(mod), number=loops, repeat=args.repeat)) / loops
        row = f"{label:32s}" + "".join(f"{best[n] * 1e3:10.3f}ms" for n in names)
        if len(names) > 1:
            row += f"{best['python'] / best['cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
