#!/usr/bin/env python3
"""Smoke test for the regionseg_py extension module.

Builds nothing itself: run `cargo build --release -p regionseg-py` first
(or `cargo build -p regionseg-py` for a debug artifact). The script locates
the compiled cdylib, exposes it under the importable module name, and
exercises the bound API end to end on a small phantom.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_extension():
    candidates = [
        REPO / "target" / "release" / "libregionseg_py.so",
        REPO / "target" / "debug" / "libregionseg_py.so",
        REPO / "target" / "release" / "regionseg_py.dll",
        REPO / "target" / "debug" / "regionseg_py.dll",
        REPO / "target" / "release" / "libregionseg_py.dylib",
        REPO / "target" / "debug" / "libregionseg_py.dylib",
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit(
            "no compiled extension found; run `cargo build --release -p regionseg-py` first"
        )
    newest = max(built, key=lambda p: p.stat().st_mtime)
    stage = Path(tempfile.mkdtemp(prefix="regionseg_py_"))
    suffix = ".pyd" if newest.suffix == ".dll" else ".so"
    shutil.copy2(newest, stage / f"regionseg_py{suffix}")
    sys.path.insert(0, str(stage))
    import regionseg_py

    return regionseg_py


def main():
    rs = import_extension()
    checks = 0

    def check(cond, what):
        nonlocal checks
        if not cond:
            sys.exit(f"FAIL: {what}")
        checks += 1
        print(f"  ok: {what}")

    print("phantom generation")
    image, labels, mask = rs.generate_phantom(seed=7, scale="desk")
    check(image.shape == (64, 64, 64), "phantom is 64^3")
    check(all(labels.count(l) > 0 for l in range(1, 13)), "all 12 structures present")
    check(mask.count(1) > 100_000, "brain mask covers the interior")

    print("fuzzy c-means normalization")
    normalized, centroids, scale = rs.normalize_wm(image, mask, clusters=3)
    check(len(centroids) == 3, "three tissue centroids")
    check(abs(centroids[-1] / scale - 1.0) < 1e-9, "bright mode maps to 1.0")
    check(700.0 < scale < 900.0, f"scale near the WM intensity (got {scale:.1f})")

    print("NIfTI round trip")
    with tempfile.TemporaryDirectory() as d:
        img_path = str(Path(d) / "image.nii")
        lab_path = str(Path(d) / "labels.nii")
        rs.write_volume(normalized, img_path)
        rs.write_label_map(labels, lab_path)
        back = rs.read_volume(img_path)
        back_labels = rs.read_label_map(lab_path)
        check(back.shape == normalized.shape, "volume shape round-trips")
        check(back_labels.labels() == labels.labels(), "labels round-trip exactly")

    print("metrics")
    check(rs.dsc(labels, labels, 1) == 1.0, "self-DSC is 1")
    check(rs.hd95(labels, labels, 2) == 0.0, "self-HD95 is 0")
    w, p, exact = rs.wilcoxon(
        [1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0], [0.0] * 10
    )
    check(w == 2.0 and exact, "signed-rank statistic on the textbook fixture")
    check(abs(p - 6.0 / 1024.0) < 1e-12, "exact two-sided p = 6/1024")

    print("patch planning")
    n, padded = rs.plan_patches((240, 240, 240), (80, 80, 80), (40, 40, 40))
    check(n == 125, "240^3 with 80^3 patches at stride 40 gives 125 patches")
    n, padded = rs.plan_patches((240, 285, 240), (80, 80, 80), (40, 40, 40))
    check(n == 175 and padded == (240, 320, 240), "285 axis pads to 320 (175 patches)")

    print("U-Net inference")
    net = rs.UNet(channels=[4, 8], num_classes=5, seed=1)
    check(net.parameter_count > 0, f"model has {net.parameter_count} parameters")
    crop_vals = [normalized.at(20 + x, 22 + y, 6 + z) for z in range(24) for y in range(24) for x in range(24)]
    crop = rs.Volume((24, 24, 24), crop_vals)
    pred = net.predict(crop)
    check(pred.shape == (24, 24, 24), "prediction matches the crop shape")
    check(all(l < 5 for l in pred.labels()), "predicted labels stay in class range")

    with tempfile.TemporaryDirectory() as d:
        ckpt = str(Path(d) / "model.ckpt")
        net.save(ckpt)
        reloaded = rs.UNet.load(ckpt)
        check(
            reloaded.predict(crop).labels() == pred.labels(),
            "checkpoint reload reproduces the prediction",
        )

    print("region layout")
    layout = rs.region_layout_json("desk")
    check('"brainstem"' in layout and '"priority"' in layout, "layout JSON lists regions")

    print(f"\nsmoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
