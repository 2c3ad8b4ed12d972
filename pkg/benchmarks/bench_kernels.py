"""Compare the numba and pure-numpy kernels behind conv2d and resampling.

Micro-benchmarks call both implementations in one process; the end-to-end
number runs a few desk-scale training steps in a subprocess per backend,
selected through ``GLYPHSTYLE_KERNELS``.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--steps 20]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from glyphstyle.numcore import _kernels as K

STEP_SCRIPT = """
import time
from glyphstyle.trainer import TrainConfig, init_state, sample_batch, training_step
state = init_state(TrainConfig(iterations={steps}))
training_step(state, sample_batch(state))  # compile / warm up
t = time.perf_counter()
for _ in range({steps}):
    training_step(state, sample_batch(state))
print((time.perf_counter() - t) / {steps})
"""


def best_of(fn, repeat):
    fn()  # JIT compile outside the timed region
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def micro(repeat):
    rng = np.random.default_rng(0)
    # shapes taken from the desk generator: 4 x 3 references at 32x32, 8-16 channels
    x = rng.random((12, 8, 32, 32)).astype(np.float32)
    ho = wo = 32
    cols = K.im2col_numpy(x, 3, 1, 1, ho, wo)
    xs = rng.random((12, 16, 16, 16)).astype(np.float32)
    x2 = rng.random((12, 16, 32, 32)).astype(np.float32)
    cases = {
        "im2col k3 s1": ("im2col", lambda f: f(x, 3, 1, 1, ho, wo)),
        "im2col k3 s2": ("im2col", lambda f: f(x, 3, 2, 1, 16, 16)),
        "col2im k3 s1": ("col2im", lambda f: f(cols, 12, 8, 32, 32, 3, 1, 1, ho, wo)),
        "avgpool 2x2": ("avgpool2", lambda f: f(x2)),
        "upsample 2x": ("upsample2", lambda f: f(xs)),
        "upsample 2x backward": ("upsample2_backward", lambda f: f(x2)),
    }
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, (name, call) in cases.items():
        t_np = best_of(lambda: call(getattr(K, name + "_numpy")), repeat)
        if K.HAVE_NUMBA:
            fast = getattr(K, name + "_numba")
            np.testing.assert_allclose(call(fast), call(getattr(K, name + "_numpy")), rtol=1e-5, atol=1e-5)
            t_nb = best_of(lambda: call(fast), repeat)
            print(f"{label:<24}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x")
        else:
            print(f"{label:<24}{t_np * 1e3:>10.3f}{'n/a':>10}")


def end_to_end(steps):
    print(f"\ntraining step (desk config, mean of {steps}):")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, GLYPHSTYLE_KERNELS=backend)
        res = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT.format(steps=steps)], env=env, capture_output=True, text=True, check=True
        )
        print(f"  {backend:<6} {float(res.stdout.strip()) * 1e3:8.1f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    print(f"active backend: {K.BACKEND}\n")
    micro(args.repeat)
    if not args.skip_e2e:
        end_to_end(args.steps)


if __name__ == "__main__":
    main()
