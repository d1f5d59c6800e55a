"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py                 # kernel micro-benchmarks
    python benchmarks/bench_kernels.py --train-steps 30  # plus a short training run per backend

Outputs agree to within floating-point reassociation; the script checks that
before timing anything.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from udarc.numerics.kernels import available_backends, get_backend

TRAIN_SNIPPET = """
import time
from udarc.synthetic import make_toy_task
from udarc.tokenizer import build_vocab
from udarc.data import build_rc_dataset
from udarc.model import EncoderConfig, init_params
from udarc.training import TrainSchedule, train_multitask
task = make_toy_task(n_train=64, n_eval=8)
vocab = build_vocab(task.vocab_corpus(), 400)
feats = build_rc_dataset(task.source_train, vocab, 64, 32)
cfg = EncoderConfig(vocab_size=len(vocab), hidden=64, num_layers=2, num_heads=4, ff_dim=128, max_position=64)
sched = TrainSchedule(total_steps={steps}, batch_size=16, lm_max_len=64, seed=0)
t = time.perf_counter()
train_multitask(init_params(cfg, 0), feats, task.target_text, sched, vocab)
print(time.perf_counter() - t)
"""


def make_cases(rows, width, seq, rng):
    x = rng.normal(size=(rows, width))
    gain, bias = rng.normal(size=width), rng.normal(size=width)
    dy = rng.normal(size=(rows, width))
    py = get_backend("python")
    y = py.softmax_forward(x)
    _, xhat, rstd = py.layer_norm_forward(x, gain, bias, 1e-12)
    s, e = rng.normal(size=seq), rng.normal(size=seq)
    return {
        "softmax_forward": (x,),
        "softmax_backward": (y, dy),
        "layer_norm_forward": (x, gain, bias, 1e-12),
        "layer_norm_backward": (dy, xhat, rstd, gain),
        "gelu_forward": (x, False),
        "gelu_backward": (x, dy, False),
        "best_span": (s, e, 10, seq - 1, 30),
    }


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def bench_kernels(args):
    rng = np.random.default_rng(args.seed)
    cases = make_cases(args.rows, args.width, args.seq, rng)
    backends = {name: get_backend(name) for name in available_backends()}
    if len(backends) < 2:
        print("compiled kernels not built; only the numpy fallback is available", file=sys.stderr)
    print(f"{'kernel':<22}" + "".join(f"{b:>14}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for kernel, call_args in cases.items():
        fns = {b: getattr(mod, kernel) for b, mod in backends.items()}
        outs = [fn(*call_args) for fn in fns.values()]
        if not all(_close(outs[0], o) for o in outs[1:]):
            raise SystemExit(f"{kernel}: backends disagree")
        times = {}
        for b, fn in fns.items():
            best = min(timeit.repeat(lambda: fn(*call_args), number=args.number, repeat=args.repeat))
            times[b] = best / args.number * 1e6
        line = f"{kernel:<22}" + "".join(f"{times[b]:>11.1f} us" for b in backends)
        if len(backends) > 1:
            line += f"   {times['python'] / times['native']:>6.2f}x"
        print(line)


def bench_training(steps):
    print(f"\nmulti-task training, {steps} steps")
    for backend in available_backends():
        env = dict(os.environ, UDARC_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  {backend:<8} {float(out.stdout.strip()):.2f} s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=512, help="rows of the (rows, width) activation")
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--seq", type=int, default=384, help="sequence length for span search")
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-steps", type=int, default=0, help="also time a short training run per backend")
    args = ap.parse_args(argv)
    bench_kernels(args)
    if args.train_steps:
        bench_training(args.train_steps)


if __name__ == "__main__":
    main()
