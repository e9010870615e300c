"""Compare the compiled GLM prep kernels against the pure-Python fallback.

    python benchmarks/bench_glm_kernels.py [--n 512] [--reps 200]

Both implementations get identical inputs. Outputs are checked for equality
before anything is timed.
"""

import argparse
import sys
import timeit

import numpy as np

from medadapt.glm_prep import Sentinels, sample_spans
from medadapt.glm_prep.kernels import compiled_kernels, python_kernels


def inputs(n, seed):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 50_000, size=n).astype(np.int64)
    spans = sample_spans(n, 0.15, 3.0, [seed])
    starts = np.array([s for s, _ in spans.spans], dtype=np.int64)
    lengths = np.array([ln for _, ln in spans.spans], dtype=np.int64)
    perm = np.array(spans.permutation, dtype=np.int64)
    return tokens, starts, lengths, perm


def bench(mod, n, reps, S):
    tokens, starts, lengths, perm = inputs(n, 0)
    corrupt = lambda: mod.corrupt_arrays(tokens, starts, lengths, perm, S.mask, S.start, S.end)
    arrays = corrupt()
    part_a, part_b, targets, pos_1, pos_2 = (np.ascontiguousarray(a, dtype=np.int64) for a in arrays[:5])
    recon = lambda: mod.reconstruct_arrays(part_a, part_b, targets, pos_1, pos_2, S.mask, S.start, S.end)
    mask = lambda: mod.attention_mask(len(part_a), len(part_b))
    out = {}
    for name, fn in (("corrupt", corrupt), ("reconstruct", recon), ("attention_mask", mask)):
        out[name] = min(timeit.repeat(fn, number=reps, repeat=3)) / reps
    return out, (arrays, recon(), mask())


def same(a, b):
    if isinstance(a, (tuple, list)):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=512, help="sequence length")
    ap.add_argument("--reps", type=int, default=200)
    args = ap.parse_args(argv)
    if compiled_kernels is None:
        print("compiled kernels not importable; build with `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    S = Sentinels.for_vocab(50_000)
    py, py_out = bench(python_kernels, args.n, args.reps, S)
    cy, cy_out = bench(compiled_kernels, args.n, args.reps, S)
    if not same(py_out, cy_out):
        print("outputs differ between implementations", file=sys.stderr)
        return 1
    print(f"n={args.n} reps={args.reps}")
    print(f"{'kernel':<16}{'python (us)':>14}{'compiled (us)':>16}{'speedup':>10}")
    for k in py:
        print(f"{k:<16}{py[k] * 1e6:>14.1f}{cy[k] * 1e6:>16.1f}{py[k] / cy[k]:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
