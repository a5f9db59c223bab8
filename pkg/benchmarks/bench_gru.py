"""Compare the compiled and pure numpy GRU kernels.

Usage: python benchmarks/bench_gru.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from tdcal import kernels


def make_inputs(B, T, P, H, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(B, T, P)), rng.normal(scale=0.3, size=(3 * H, P)),
            rng.normal(scale=0.3, size=(3 * H, H)), np.zeros(3 * H), np.zeros(3 * H),
            rng.normal(size=(B, T, H)))


def time_backend(mod, args, repeat):
    U, Wx, Wh, bx, bh, dhs = args
    fwd = min(timeit.repeat(lambda: mod.gru_forward(U, Wx, Wh, bx, bh), number=20, repeat=repeat)) / 20

    def both():
        hs, gates, hn = mod.gru_forward(U, Wx, Wh, bx, bh)
        mod.gru_backward(U, Wx, Wh, hs, gates, hn, dhs)

    full = min(timeit.repeat(both, number=20, repeat=repeat)) / 20
    return fwd, full


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = ["python"] + (["cython"] if kernels._ext is not None else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'B':>4} {'T':>3} {'H':>3}  " + "  ".join(f"{b + ' fwd':>12} {b + ' f+b':>12}" for b in backends)
          + ("  speedup fwd  speedup f+b" if len(backends) == 2 else ""))
    for B, T, H in [(1, 8, 32), (1, 40, 32), (32, 8, 32), (128, 8, 32), (32, 40, 64)]:
        inputs = make_inputs(B, T, H, H)
        res = {b: time_backend(kernels.backend_module(b), inputs, args.repeat) for b in backends}
        line = f"{B:>4} {T:>3} {H:>3}  " + "  ".join(f"{res[b][0] * 1e6:>10.1f}us {res[b][1] * 1e6:>10.1f}us" for b in backends)
        if len(backends) == 2:
            line += f"  {res['python'][0] / res['cython'][0]:>10.2f}x {res['python'][1] / res['cython'][1]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
