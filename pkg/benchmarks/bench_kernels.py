"""Time the numba and numpy backends of the hot kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Reports the best-of-N wall time for each kernel and backend plus an
end-to-end graph build and one training epoch, and checks that both
backends return identical bytes.
"""
import argparse
import time

import numpy as np

from crystalmt import _kernels
from crystalmt.experiments import SynthSpec, dataset_from_structures, generate_synthetic
from crystalmt.graph import GraphConfig, build_graph, image_offsets
from crystalmt.model import ModelConfig
from crystalmt.training import TrainConfig, train


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def same(a, b):
    if isinstance(a, tuple):
        return all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    return a.tobytes() == b.tobytes()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    values = rng.normal(size=(200_000, 64))
    index = rng.integers(0, 5_000, size=200_000)
    lattice = np.diag([4.1, 4.3, 4.7]) + rng.normal(scale=0.3, size=(3, 3))
    frac = rng.uniform(size=(24, 3))
    offsets = image_offsets(lattice, 8.0)
    structures, targets, _ = generate_synthetic(SynthSpec(n=150, atoms=(4, 8), seed=0))
    gcfg = GraphConfig()

    cases = {
        "segment_sum 200k x 64": lambda: _kernels.segment_sum(values, index, 5_000),
        "image_distances 24 atoms, cutoff 8": lambda: tuple(
            part for c in range(len(frac)) for part in _kernels.image_distances(frac, lattice, c, offsets, 8.0)),
        "build_graph x150": lambda: [build_graph(s, gcfg) for s in structures],
    }

    for backend in ("numba", "numpy"):  # warm the JIT cache before timing
        _kernels.set_backend(backend)
        for fn in cases.values():
            fn()

    print(f"{'case':40s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}  identical")
    for name, fn in cases.items():
        _kernels.set_backend("numba")
        t_nb, out_nb = best_of(fn, args.repeat)
        _kernels.set_backend("numpy")
        t_np, out_np = best_of(fn, args.repeat)
        if isinstance(out_nb, list):
            ident = all(same(g.bond_features, h.bond_features) for g, h in zip(out_nb, out_np))
        else:
            ident = same(out_nb, out_np)
        print(f"{name:40s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.2f}  {ident}")

    ds = dataset_from_structures(structures, targets, gcfg)
    mcfg = ModelConfig(n_tasks=3)
    tcfg = TrainConfig(max_epochs=1, patience=1)
    for backend in ("numba", "numpy"):
        _kernels.set_backend(backend)
        t, _ = best_of(lambda: train(ds, mcfg, tcfg), 2)
        print(f"{'train 1 epoch (' + backend + ')':40s} {t:10.4f}")


if __name__ == "__main__":
    main()
