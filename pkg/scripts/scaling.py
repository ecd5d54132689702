"""Time one backward pass of the chain CRF across vocabulary sizes."""

import argparse
import time

import numpy as np

from crfgen.crf import ChainCrfParams, backward_pass, init_crf_params


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 4000, 8000, 16000])
    ap.add_argument("--rank", type=int, default=32)
    ap.add_argument("--length", type=int, default=15)
    ap.add_argument("--latent-dim", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    h = rng.normal(size=(args.length, args.latent_dim))
    times = []
    for V in args.sizes:
        p = ChainCrfParams.from_flat(init_crf_params(V, args.rank, args.latent_dim, rng, hidden=64))
        backward_pass(h, p)
        runs = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            backward_pass(h, p)
            runs.append(time.perf_counter() - t0)
        times.append(float(np.median(runs)))
        print(f"|V|={V:6d}  median {1e3 * times[-1]:8.2f} ms")
    slope = np.polyfit(np.log(args.sizes), np.log(times), 1)[0]
    print(f"log-log slope {slope:.3f}")


if __name__ == "__main__":
    main()
