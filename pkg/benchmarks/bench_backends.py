"""Timing comparison of the compiled and numpy kernel backends.

Times the three hot kernels in isolation and one encoder
forward+backward per backend.  Run after `pip install -e .`:

    python benchmarks/bench_backends.py
"""

import argparse
import time

import numpy as np

from maskfew import backend
from maskfew import tensor as T
from maskfew.encoder import EncoderConfig, TokenSequence, classify, init_params


def time_call(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(rows, cols, repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, cols))
    gy = rng.normal(size=(rows, cols))
    gain = np.ones(cols)
    bias = np.zeros(cols)
    xflat = np.ascontiguousarray(x.ravel())
    y = backend.impl.softmax_fwd(x)
    cases = {
        "gelu_fwd": lambda: backend.impl.gelu_fwd(xflat),
        "softmax_fwd": lambda: backend.impl.softmax_fwd(x),
        "softmax_bwd": lambda: backend.impl.softmax_bwd(y, gy),
        "layernorm_fwd": lambda: backend.impl.layernorm_fwd(x, gain, bias, 1e-5),
    }
    return {name: time_call(fn, repeats) for name, fn in cases.items()}


def bench_encoder(repeats):
    cfg = EncoderConfig(vocab_size=200, max_len=32, d_model=64, n_layers=2,
                        n_heads=4, d_ff=128, n_classes=6)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    seq = TokenSequence(np.concatenate([[0], rng.integers(4, 200, size=20)]))

    def step():
        with T.fresh_tape():
            logits = classify(seq, params)
            loss = T.sum(T.mul(logits, logits))
            params.zero_grads()
            T.backward(loss)

    return time_call(step, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()

    names = backend.available()
    if "cython" not in names:
        print("compiled backend not built; run pip install -e . first")
    results = {}
    for name in names:
        backend.use(name)
        results[name] = bench_kernels(args.rows, args.cols, args.repeats)
        results[name]["encoder_fwd_bwd"] = bench_encoder(args.repeats)

    kernels = list(results[names[0]])
    header = f"{'kernel':<18}" + "".join(f"{n:>14}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(f"shapes: ({args.rows}, {args.cols}), repeats: {args.repeats}")
    print(header)
    for k in kernels:
        row = f"{k:<18}" + "".join(f"{results[n][k] * 1e6:>12.1f}us" for n in names)
        if len(names) == 2:
            row += f"{results[names[0]][k] / results[names[1]][k]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
