"""Generate FLIP reference error maps with NVIDIA's flip_evaluator package.

The outputs are frozen into crates/core/tests/fixtures/flip and compared
per pixel against the Rust implementation.

    pip install flip-evaluator
    python python/tools/make_flip_fixtures.py
"""
import json
import pathlib

import numpy as np
from PIL import Image
import flip_evaluator as flip

OUT = pathlib.Path(__file__).resolve().parents[2] / "crates/core/tests/fixtures/flip"
H, W = 64, 96
PPD = 67.0


def quantize(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def pairs():
    rng = np.random.default_rng(20240611)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    # smooth colour ramps with a disc, distorted by additive noise
    ref = np.stack([xx / W, yy / H, 0.5 + 0.4 * np.sin(xx / 9.0)], axis=-1)
    ref[(xx - 60) ** 2 + (yy - 30) ** 2 < 15 ** 2] = [0.9, 0.2, 0.1]
    test = ref + rng.normal(0.0, 0.08, ref.shape)
    yield "noise", quantize(ref), quantize(test)

    # high-contrast grating, distorted by a box blur
    g = 0.5 + 0.45 * np.sign(np.sin(xx / 3.0)) * np.cos(yy / 11.0)
    ref = np.stack([g, 0.8 * g, 1.0 - g], axis=-1)
    k = 5
    pad = np.pad(ref, ((k // 2, k // 2), (k // 2, k // 2), (0, 0)), mode="edge")
    test = np.zeros_like(ref)
    for dy in range(k):
        for dx in range(k):
            test += pad[dy:dy + H, dx:dx + W]
    test /= k * k
    yield "blur", quantize(ref), quantize(test)

    # random colour blocks, distorted by a hue/brightness shift
    blocks = rng.uniform(0.0, 1.0, (H // 8, W // 8, 3))
    ref = np.kron(blocks, np.ones((8, 8, 1)))
    test = ref[..., [1, 2, 0]] * 0.9 + 0.05
    yield "color", quantize(ref), quantize(test)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    meta = {"ppd": PPD, "height": H, "width": W, "cases": {}}
    for name, ref8, test8 in pairs():
        Image.fromarray(ref8).save(OUT / f"{name}_ref.png")
        Image.fromarray(test8).save(OUT / f"{name}_test.png")
        ref = ref8.astype(np.float32) / 255.0
        test = test8.astype(np.float32) / 255.0
        err, mean, _ = flip.evaluate(ref, test, "LDR", applyMagma=False, parameters={"ppd": PPD})
        err = np.asarray(err, dtype="<f4").reshape(H, W)
        err.tofile(OUT / f"{name}_flip.f32")
        meta["cases"][name] = {"mean": float(mean), "max": float(err.max())}
    (OUT / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


if __name__ == "__main__":
    main()
