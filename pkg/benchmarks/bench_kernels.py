"""Time the compiled and NumPy kernel backends on transformer-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes mirror a ViT-Nano batch at 32x32 / p=8 (17 tokens, K=64) and a
ViT-S slice at 256x256 / p=16 (257 tokens, K=384). A last section times one
full pretraining step under each backend.
"""

import argparse
import json
import timeit

import numpy as np

from sbssl import kernels

SHAPES = {
    "nano": dict(rows=64 * 17, width=64, attn=(64 * 2 * 17, 17)),
    "small": dict(rows=257, width=384, attn=(6 * 257, 257)),
}


def cases(shape, rng, dtype):
    x = rng.standard_normal((shape["rows"], shape["width"])).astype(dtype)
    gy = rng.standard_normal(x.shape).astype(dtype)
    gain = np.ones(shape["width"], dtype)
    bias = np.zeros(shape["width"], dtype)
    s = rng.standard_normal(shape["attn"]).astype(dtype)
    p = kernels.softmax_forward(s)
    _, xhat, rstd = kernels.layernorm_forward(x, gain, bias, 1e-6)
    hid = rng.standard_normal((shape["rows"], 4 * shape["width"])).astype(dtype)
    return {
        "gelu_forward": lambda: kernels.gelu_forward(hid),
        "gelu_backward": lambda: kernels.gelu_backward(hid, hid),
        "softmax_forward": lambda: kernels.softmax_forward(s),
        "softmax_backward": lambda: kernels.softmax_backward(p, s),
        "layernorm_forward": lambda: kernels.layernorm_forward(x, gain, bias, 1e-6),
        "layernorm_backward": lambda: kernels.layernorm_backward(gy, xhat, rstd, gain),
    }


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def train_step_fn():
    from sbssl.corruption import CorruptionSpec
    from sbssl.data import AugmentConfig, SynthSpec, generate_synthetic
    from sbssl.encoder import preset
    from sbssl.pretrain import PretrainConfig, pretrain

    vols = generate_synthetic(SynthSpec(n_train=16, n_valid=0))["train"]
    enc = preset("vit-nano", image_size=32, patch_size=8, dtype="float32")
    cfg = PretrainConfig(epochs=1, batch_size=32, slices_per_exam=2,
                         corruption=CorruptionSpec(), augment=AugmentConfig.off())
    return lambda: pretrain(vols, enc, cfg)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the NumPy fallback only")
    results = []
    for dtype in (np.float32, np.float64):
        for size, shape in SHAPES.items():
            rng = np.random.default_rng(0)
            for backend in backends:
                kernels.use_backend(backend)
                for name, fn in cases(shape, rng, dtype).items():
                    results.append(dict(kernel=name, size=size, dtype=np.dtype(dtype).name,
                                        backend=backend, seconds=best_of(fn, args.repeat)))
    step = train_step_fn()
    for backend in backends:
        kernels.use_backend(backend)
        results.append(dict(kernel="pretrain_epoch", size="nano16x2", dtype="float32",
                            backend=backend, seconds=best_of(step, max(3, args.repeat // 5))))

    by_key = {}
    for r in results:
        by_key.setdefault((r["kernel"], r["size"], r["dtype"]), {})[r["backend"]] = r["seconds"]
    print(f"{'kernel':<20}{'size':<10}{'dtype':<9}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for (name, size, dtype), t in by_key.items():
        py, cy = t.get("python"), t.get("cython")
        speed = f"{py / cy:8.2f}x" if py and cy else "       -"
        cy_ms = f"{cy * 1e3:11.3f}" if cy else "          -"
        print(f"{name:<20}{size:<10}{dtype:<9}{py * 1e3:11.3f}{cy_ms}{speed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
