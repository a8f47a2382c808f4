"""Time the compiled kernels against the numpy fallback on model-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from eegcvae import _backend
from eegcvae.dsp import design_butterworth_bandpass


def cases(rng):
    # batch 50, the first encoder convolution and the (15, 1) spatial one
    x1 = rng.standard_normal((50, 1, 15, 400)).astype(np.float32)
    w1 = rng.standard_normal((5, 1, 1, 20)).astype(np.float32)
    x2 = rng.standard_normal((50, 5, 15, 400)).astype(np.float32)
    w2 = rng.standard_normal((5, 5, 15, 1)).astype(np.float32)
    y1 = _backend.corr2d(np.pad(x1, ((0, 0), (0, 0), (0, 0), (9, 10))), w1)
    y2 = _backend.corr2d(x2, w2)
    sos = design_butterworth_bandpass(3, 4.0, 30.0, 160.0).sos
    sig = rng.standard_normal((15, 9600))
    return {
        "corr2d temporal": lambda: _backend.corr2d(np.pad(x1, ((0, 0), (0, 0), (0, 0), (9, 10))), w1),
        "corr2d spatial": lambda: _backend.corr2d(x2, w2),
        "grad_input temporal": lambda: _backend.corr2d_grad_input(y1, w1, 15, 419),
        "grad_input spatial": lambda: _backend.corr2d_grad_input(y2, w2, 15, 400),
        "grad_weight temporal": lambda: _backend.corr2d_grad_weight(
            np.pad(x1, ((0, 0), (0, 0), (0, 0), (9, 10))), y1, 1, 20),
        "grad_weight spatial": lambda: _backend.corr2d_grad_weight(x2, y2, 15, 1),
        "sosfilt 15x9600": lambda: _backend.sosfilt(sos, sig),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = _backend.available()
    if "cython" not in backends:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace` first")
    timings = {}
    for b in backends:
        _backend.use(b)
        for label, fn in cases(np.random.default_rng(0)).items():
            fn()  # warm-up
            timings.setdefault(label, {})[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    header = f"{'kernel':<22}" + "".join(f"{b + ' (ms)':>15}" for b in backends)
    if len(backends) > 1:
        header += f"{'speed-up':>11}"
    print(header)
    for label, row in timings.items():
        line = f"{label:<22}" + "".join(f"{1e3 * row[b]:>15.2f}" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:>10.1f}x"
        print(line)


if __name__ == "__main__":
    main()
