"""Numba vs numpy timing for the kernels in ``mapreg.kernels``.

Each kernel is timed on the arguments it actually receives during one
forward/backward pass over a collated batch, so sizes match training.

    python benchmarks/bench_kernels.py --batch 64 --arch gat
"""
import argparse
import timeit

import numpy as np

from mapreg import kernels, nn
from mapreg.datagen import SceneConfig, make_dataset
from mapreg.losses import LossWeights
from mapreg.trainer import collate, loss_and_grad, prepare


def record_calls(step):
    """Run ``step`` once and return {kernel name: first argument tuple}."""
    seen = {}
    originals = {}
    for name in kernels.BACKENDS["numpy"]:
        originals[name] = getattr(kernels, name)

        def spy(*args, name=name):
            seen.setdefault(name, args)
            return originals[name](*args)

        setattr(kernels, name, spy)
    try:
        step()
    finally:
        for name, fn in originals.items():
            setattr(kernels, name, fn)
    return seen


def as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64, help="scenes per batch")
    ap.add_argument("--arch", choices=["gcn", "gat"], default="gat")
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)

    samples = [prepare(s) for s in make_dataset(SceneConfig(), args.batch, base_seed=0)]
    graph, sup = collate(samples)
    model = nn.init_model(args.arch, 5, width=args.width, seed=0)
    weights = LossWeights(1, 1, 1)

    def step():
        return loss_and_grad(model, graph, sup, weights)

    calls = record_calls(step)
    print(f"batch={args.batch} scenes, {graph.n_nodes} nodes, {len(graph.csr[1])} CSR entries, arch={args.arch}")
    print(f"{'kernel':<28}{'numpy':>12}{'numba':>12}{'speedup':>10}")

    for name, a in sorted(calls.items()):
        fns = {b: (lambda b=b: kernels.BACKENDS[b][name](*a)) for b in ("numpy", "numba")}
        fns["numba"]()  # compile outside the timed region
        for x, y in zip(as_tuple(fns["numpy"]()), as_tuple(fns["numba"]())):
            np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-12)
        t_np = best_of(fns["numpy"], args.repeat, args.number)
        t_nb = best_of(fns["numba"], args.repeat, args.number)
        print(f"{name:<28}{t_np * 1e6:>10.1f}us{t_nb * 1e6:>10.1f}us{t_np / t_nb:>9.1f}x")

    totals = {}
    for b in ("numpy", "numba"):
        with kernels.use_backend(b):
            step()
            totals[b] = best_of(step, args.repeat, max(1, args.number // 4))
    print(f"{'full loss_and_grad step':<28}{totals['numpy'] * 1e3:>10.2f}ms{totals['numba'] * 1e3:>10.2f}ms"
          f"{totals['numpy'] / totals['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
