"""Compare the compiled and numpy FRST vote-accumulation backends.

    python benchmarks/bench_frst.py [--shape 64 64 32] [--repeat 5]

Times the full frst3d call (gradient, votes for every radius, smoothing) and
the vote kernel alone, and checks that both backends agree.
"""
import argparse
import time

import numpy as np

from lesionsynth.detection import _frst_py
from lesionsynth.detection.frst import FRSTParams, available_backends, frst3d, image_gradient
from lesionsynth.phantom import PhantomConfig, generate_phantom


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--shape", type=int, nargs=3, default=[64, 64, 32])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    vol = generate_phantom(PhantomConfig(shape=tuple(args.shape), seed=1)).volume.data.astype(np.float64)
    params = FRSTParams()
    backends = available_backends()
    print(f"volume {tuple(args.shape)}, radii {params.radii_vox}, backends {backends}")

    gx, gy, gz = image_gradient(vol)
    mag = np.sqrt(gx ** 2 + gy ** 2 + gz ** 2)
    kernels = {"python": _frst_py.accumulate_votes}
    if "cython" in backends:
        from lesionsynth.detection import _frst_ext
        kernels["cython"] = _frst_ext.accumulate_votes

    results = {}
    for name in backends:
        k = kernels[name]
        t_kernel = best_of(lambda: [k(gx, gy, gz, mag, 0.0, n) for n in params.radii_vox], args.repeat)
        t_full = best_of(lambda: frst3d(vol, params, backend=name), args.repeat)
        results[name] = (t_kernel, t_full)
        print(f"{name:>7}: votes {t_kernel * 1e3:8.2f} ms   frst3d {t_full * 1e3:8.2f} ms")

    if len(backends) > 1:
        diff = np.abs(frst3d(vol, params, backend="cython") - frst3d(vol, params, backend="python")).max()
        sk = results["python"][0] / results["cython"][0]
        sf = results["python"][1] / results["cython"][1]
        print(f"speed-up: votes x{sk:.1f}, frst3d x{sf:.1f}; max |difference| {diff:.1e}")
    else:
        print("compiled extension not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
