"""Times the compiled and NumPy training kernels on the same problem.

Usage: python3 benchmarks/bench_kernels.py [--samples N] [--repeat R]
"""

import argparse
import timeit

import numpy as np

from cflsim import _pykernels, kernels
from cflsim.model import LossSpec, ModelSpec


def make_problem(samples, input_dim, hidden, seed=0):
    spec = ModelSpec(input_dim, "mlp", hidden_units=hidden, activation="relu", loss=LossSpec("focal", 0.25, 2.0))
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=0.1, size=spec.parameter_count)
    X = rng.normal(size=(samples, input_dim))
    y = rng.integers(0, 2, samples).astype(np.float64)
    order = np.stack([rng.permutation(samples) for _ in range(5)]).astype(np.int64)
    return spec, w, X, y, order


def time_backend(backend, spec, w, X, y, order, repeat):
    codes = spec._codes()

    def grad():
        backend.loss_grad(*codes, w, X, y)

    def train():
        backend.train_local(*codes, 1, 1e-3, 0.9, 0.999, 1e-8, w, X, y, order, 16, None)

    return (
        min(timeit.repeat(grad, number=20, repeat=repeat)) / 20,
        min(timeit.repeat(train, number=1, repeat=repeat)),
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--samples", type=int, default=400)
    parser.add_argument("--input-dim", type=int, default=32)
    parser.add_argument("--hidden", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    problem = make_problem(args.samples, args.input_dim, args.hidden)
    backends = [("python", _pykernels)]
    if kernels.compiled_available():
        backends.insert(0, ("cython", kernels.get_backend("cython")))
    else:
        print("compiled kernels not built; timing the NumPy backend only")

    rows = {name: time_backend(mod, *problem, args.repeat) for name, mod in backends}
    print(f"{'backend':<8} {'loss_grad (ms)':>15} {'train_local 5 epochs (ms)':>26}")
    for name, (g, t) in rows.items():
        print(f"{name:<8} {g * 1e3:>15.3f} {t * 1e3:>26.2f}")
    if len(rows) == 2:
        (gc, tc), (gp, tp) = rows["cython"], rows["python"]
        print(f"speedup  {gp / gc:>14.1f}x {tp / tc:>25.1f}x")


if __name__ == "__main__":
    main()
