"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]

Both paths are called directly, so the HOIDESK_DISABLE_NUMBA flag does not
matter here. Each row also checks that the two paths agree.
"""
import argparse
import time

import numpy as np

from hoidesk import kernels


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def random_boxes(rng, n):
    xy = rng.uniform(0, 600, (n, 2))
    return np.concatenate([xy, xy + rng.uniform(10, 200, (n, 2))], axis=1)


def cases(rng):
    cost = rng.standard_normal((64, 64))
    yield "hungarian 64x64", kernels.hungarian_jit, kernels.hungarian_numpy, (cost,)
    cost = rng.standard_normal((30, 200))  # rows <= columns
    yield "hungarian 30x200", kernels.hungarian_jit, kernels.hungarian_numpy, (cost,)

    a, b = random_boxes(rng, 500), random_boxes(rng, 500)
    yield "iou_matrix 500x500", kernels.iou_matrix_jit, kernels.iou_matrix_numpy, (a, b)

    n = 2000
    h, o = random_boxes(rng, n), random_boxes(rng, n)
    h[n // 2:] = h[: n // 2] + rng.uniform(-5, 5, (n // 2, 4))
    o[n // 2:] = o[: n // 2] + rng.uniform(-5, 5, (n // 2, 4))
    cats = rng.integers(0, 20, n)
    order = np.argsort(-rng.random(n), kind="stable")
    yield "triplet_nms 2000", kernels.triplet_nms_jit, kernels.triplet_nms_numpy, (h, o, cats, order, 0.7)

    gh, go = random_boxes(rng, 50), random_boxes(rng, 50)
    ph = np.repeat(gh, 8, axis=0) + rng.uniform(-10, 10, (400, 4))
    po = np.repeat(go, 8, axis=0) + rng.uniform(-10, 10, (400, 4))
    yield "match_image 400x50", kernels.match_image_jit, kernels.match_image_numpy, (ph, po, gh, go, 0.5)


def same(x, y):
    if isinstance(x, tuple):
        return all(same(a, b) for a, b in zip(x, y))
    return np.array_equal(x, y) or np.allclose(x, y, rtol=0, atol=1e-12)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, jit_fn, np_fn, inputs in cases(rng):
        t_jit = best_of(jit_fn, inputs, args.repeat)
        t_np = best_of(np_fn, inputs, args.repeat)
        agree = same(jit_fn(*inputs), np_fn(*inputs))
        print(f"{name:<22}{t_jit * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_jit:>8.1f}x  {agree}")


if __name__ == "__main__":
    main()
