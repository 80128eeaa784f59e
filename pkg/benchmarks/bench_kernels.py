"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel is timed on both backends (best of N) and checked for
bit-identical output; a short training run is timed end to end.
"""

import argparse
import json
import timeit

import numpy as np

from trainaccel import kernels
from trainaccel.config import load_config
from trainaccel.harness import train


def cases(rng):
    x = rng.standard_normal(1_000_000).astype(np.float32)
    a = rng.standard_normal((256, 512)).astype(np.float32)
    b = rng.standard_normal((512, 128)).astype(np.float32)
    img = rng.standard_normal((32, 8, 32, 32)).astype(np.float32)
    cols = kernels.get_backend("python").im2col(img, 3, 1, 1)
    bits = kernels.get_backend("python").to_half_bits(x)
    return {
        "round_half 1M": lambda k: k.round_half(x),
        "to_half_bits 1M": lambda k: k.to_half_bits(x),
        "from_half_bits 1M": lambda k: k.from_half_bits(bits),
        "matmul 256x512x128": lambda k: k.matmul(a, b),
        "im2col 32x8x32x32 k3": lambda k: k.im2col(img, 3, 1, 1),
        "col2im 32x8x32x32 k3": lambda k: k.col2im(cols, img.shape, 3, 1, 1),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy backend only")
    results = []
    rng = np.random.default_rng(0)
    a = rng.standard_normal((256, 512)).astype(np.float32)
    b = rng.standard_normal((512, 128)).astype(np.float32)
    for name, fn in cases(rng).items():
        row = {"case": name}
        outs = {}
        for be in backends:
            mod = kernels.get_backend(be)
            outs[be] = fn(mod)
            row[be] = best_of(lambda: fn(mod), args.repeat)
        if len(outs) == 2:
            row["identical"] = bool(np.array_equal(outs["python"], outs["cython"], equal_nan=True))
        results.append(row)

    if "cython" in backends:
        fixed = kernels.get_backend("cython").matmul_fixed_order
        ref = kernels.get_backend("python").matmul
        results.append({"case": "matmul 256x512x128 fixed-order loop vs BLAS",
                        "python": best_of(lambda: ref(a, b), args.repeat),
                        "cython": best_of(lambda: fixed(a, b), args.repeat),
                        "identical": bool(np.allclose(fixed(a, b), ref(a, b), rtol=1e-4, atol=1e-4))})

    cfg = load_config("cifar10-subset").with_overrides({"epochs": 1, "amp_enabled": True})
    row = {"case": "train 1 epoch cnn+amp (2000 records)"}
    for be in backends:
        with kernels.use_backend(be):
            row[be] = best_of(lambda: train(cfg), max(1, args.repeat // 2))
    results.append(row)

    width = max(len(r["case"]) for r in results)
    print(f"{'case':<{width}}  " + "  ".join(f"{b:>10}" for b in backends) + "   speedup  agrees")
    for r in results:
        times = "  ".join(f"{1e3 * r[b]:>8.2f}ms" for b in backends)
        speed = f"{r['python'] / r['cython']:>8.2f}x" if "cython" in r else "        -"
        print(f"{r['case']:<{width}}  {times}  {speed}  {r.get('identical', '-')}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
