"""Compare the compiled kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 2048] [--fields 39] [--dim 16]

Prints the best-of-N time per kernel for each backend, the speedup, and
the max abs difference between the two outputs. A final row times one
training epoch of a small DeepFM with each backend swapped in.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from sseds import _kernels_py, kernels
from sseds.dataio import SynthSpec, planted_profile, synth_generate
from sseds.model import ModelConfig, init_model, train

try:
    from sseds import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

NAMES = ("scatter_add_rows", "fm_forward", "fm_backward", "sparse_adam", "slot_grad_reduce")


def _cases(rng: np.random.Generator, n: int, m: int, d: int, vocab: int) -> dict:
    E = rng.standard_normal((n, m, d)).astype(np.float32)
    S = E.sum(axis=1)
    dz = rng.standard_normal(n).astype(np.float32)
    index = rng.integers(0, vocab, size=n).astype(np.int64)
    vals = rng.standard_normal((n, d)).astype(np.float32)
    rows = np.unique(index)
    grad = rng.standard_normal((len(rows), d)).astype(np.float32)
    table = rng.standard_normal((vocab, d)).astype(np.float32)
    m1 = np.zeros_like(table)
    m2 = np.zeros_like(table)
    def scatter(k):
        out = np.zeros((vocab, d), np.float32)
        k.scatter_add_rows(out, index, vals)
        return out

    def adam(k):
        p = table.copy()
        k.sparse_adam(p, rows, grad, m1.copy(), m2.copy(), 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
        return p

    return {
        "scatter_add_rows": scatter,
        "fm_forward": lambda k: k.fm_forward(E),
        "fm_backward": lambda k: k.fm_backward(E, S, dz),
        "sparse_adam": adam,
        "slot_grad_reduce": lambda k: k.slot_grad_reduce(vals.reshape(n, 1, d).repeat(m, 1), E),
    }


def _best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat: int, n: int, m: int, d: int, vocab: int) -> list[tuple]:
    rows = []
    cases = _cases(np.random.default_rng(0), n, m, d, vocab)
    for name in NAMES:
        call = cases[name]
        t_py = _best(lambda: call(_kernels_py), repeat)
        t_c = _best(lambda: call(_compiled), repeat) if _compiled else float("nan")
        diff = float("nan")
        if _compiled:
            a, b = call(_kernels_py), call(_compiled)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))
        rows.append((name, t_py, t_c, diff))
    return rows


def bench_epoch(repeat: int) -> tuple[float, float]:
    sizes = [200] * 10
    spec = SynthSpec(sizes, 20000, planted_profile("uniform", 10, 8, 0.5))
    data = synth_generate(spec, seed=0)
    cfg = ModelConfig("DeepFM", 16, (64, 64))

    def epoch():
        model = init_model(cfg, sizes, seed=1)
        train(model, data, None, 1, 512, 1e-3, seed=2)

    times = {}
    saved = {k: getattr(kernels, k) for k in NAMES}
    for label, impl in (("numpy", _kernels_py), ("cython", _compiled)):
        if impl is None:
            times[label] = float("nan")
            continue
        for k in NAMES:
            setattr(kernels, k, getattr(impl, k))
        try:
            times[label] = _best(epoch, repeat)
        finally:
            for k, fn in saved.items():
                setattr(kernels, k, fn)
    return times["numpy"], times["cython"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=2048)
    ap.add_argument("--fields", type=int, default=39)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--vocab", type=int, default=5000)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()

    print(f"default backend: {kernels.BACKEND}; compiled extension {'found' if _compiled else 'missing'}")
    print(f"{'kernel':<18}{'numpy ms':>11}{'cython ms':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, t_py, t_c, diff in bench_kernels(args.repeat, args.batch, args.fields, args.dim, args.vocab):
        print(f"{name:<18}{t_py * 1e3:>11.3f}{t_c * 1e3:>11.3f}{t_py / t_c:>9.2f}{diff:>12.2e}")
    if not args.skip_epoch:
        t_py, t_c = bench_epoch(max(1, args.repeat // 2))
        print(f"{'train epoch':<18}{t_py * 1e3:>11.1f}{t_c * 1e3:>11.1f}{t_py / t_c:>9.2f}{'':>12}")


if __name__ == "__main__":
    main()
