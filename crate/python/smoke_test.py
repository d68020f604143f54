#!/usr/bin/env python3
"""Smoke test for the Python bindings.

Uses an installed `vismask` module if there is one (e.g. after
`maturin develop -m crates/py/Cargo.toml`); otherwise loads the library
built by `cargo build -p vismask-py`.
"""

import importlib.machinery
import importlib.util
import math
import random
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def load_module():
    try:
        import vismask  # noqa: F401

        return sys.modules["vismask"]
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libvismask.so"
        if lib.exists():
            break
    else:
        sys.exit("build the bindings first: cargo build -p vismask-py")
    # the extension must be importable under its module name
    tmp = Path(tempfile.mkdtemp())
    target = tmp / "vismask.abi3.so"
    shutil.copy(lib, target)
    loader = importlib.machinery.ExtensionFileLoader("vismask", str(target))
    spec = importlib.util.spec_from_file_location("vismask", target, loader=loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def random_image(vm, h, w, seed):
    rng = random.Random(seed)
    return vm.Image(h, w, [rng.random() for _ in range(h * w * 3)])


def main():
    vm = load_module()
    print("vismask", vm.__version__)

    x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]
    y = [0.1, 0.3, 0.2, 0.5, 0.4, 0.7, 0.8, 0.75, 0.95]
    s, k = vm.srcc(x, y), vm.krcc(x, y)
    plcc, params, fallback = vm.plcc_fitted(x, y)
    assert 0.9 < s <= 1.0 and 0.7 < k <= 1.0, (s, k)
    assert 0.9 < plcc <= 1.0 and len(params) == 4, plcc
    print(f"srcc {s:.4f} krcc {k:.4f} plcc {plcc:.4f} (linear fallback: {fallback})")

    ref = random_image(vm, 48, 48, 1)
    dist = vm.Image(48, 48, [min(1.0, v + 0.05) for v in ref.to_list()])
    metrics = vm.Metrics()
    assert metrics.score("mae", ref, ref) == 0.0
    assert metrics.score("ssim", ref, ref) == 1.0
    for name in ("mae", "psnr", "ssim", "flip"):
        v = metrics.score(name, ref, dist)
        assert math.isfinite(v), name
        print(f"{name:5s} {v:.5f}")
    h, w, values = metrics.error_map("flip", ref, dist)
    assert (h, w) == (48, 48) and len(values) == h * w

    deep = vm.Metrics.with_random_backbone(3)
    assert abs(deep.score("lpips", ref, ref)) < 1e-5

    try:
        metrics.score("mae", ref, random_image(vm, 48, 40, 2))
    except ValueError:
        pass
    else:
        raise AssertionError("size mismatch was accepted")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = vm.make_synthetic(tmp / "data", refs=2, side=48, seed=0)
        out = vm.train("mae", manifest, tmp / "run", max_steps=3, short_side=None,
                       val_fraction=0.0, learning_rate=1e-3)
        assert out["steps"] == 3, out
        e = vm.EnhancedMetric.load(out["checkpoint"])
        assert e.base == "mae" and e.name == "e-mae", e.name
        mh, mw, mask = e.mask(ref, dist)
        assert (mh, mw) == (48, 48) and all(0.0 < v < 1.0 for v in mask)
        print("e-mae", e.score(ref, dist))

        reports = vm.evaluate(manifest, ["mae", "ssim"], [out["checkpoint"]])
        assert [r["metric"] for r in reports] == ["mae", "ssim", "e-mae"], reports
        assert all(r["n"] == 20 for r in reports)
        for r in reports:
            print(f"{r['metric']:6s} srcc {r['srcc']:.3f} plcc {r['plcc']:.3f}")

        metrics.render_error_map("mae", ref, dist, tmp / "err.png")
        e.render_mask(ref, dist, tmp / "mask.png")
        assert (tmp / "err.png").exists() and (tmp / "err.json").exists()
        assert (tmp / "mask.png").exists()

        e.save(tmp / "copy.ckpt")
        again = vm.EnhancedMetric.load(tmp / "copy.ckpt")
        assert again.score(ref, dist) == e.score(ref, dist)

    print("ok")


if __name__ == "__main__":
    main()
