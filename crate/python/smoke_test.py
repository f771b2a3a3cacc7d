"""Smoke test for the fpm extension module.

Builds nothing itself: run `cargo build -p fpm-py` (or --release) first,
then `python3 python/smoke_test.py`. The script locates the compiled
cdylib under target/, exposes it as an importable `fpm` module, and
drives one tiny simulate/reconstruct/calibrate round trip.
"""

import pathlib
import shutil
import sys
import sysconfig

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libfpm.so", "libfpm.dylib", "fpm.dll")
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("no compiled extension found; run `cargo build -p fpm-py` first")
    newest = max(built, key=lambda p: p.stat().st_mtime)
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    staging = ROOT / "target" / "python"
    staging.mkdir(parents=True, exist_ok=True)
    module_path = staging / ("fpm" + suffix)
    if not module_path.exists() or module_path.stat().st_mtime < newest.stat().st_mtime:
        shutil.copy2(newest, module_path)
    sys.path.insert(0, str(staging))
    import fpm

    return fpm


def main():
    fpm = load_module()

    na = fpm.illumination_na(69)
    assert abs(na - 0.24926) < 1e-5, f"illumination NA {na}"
    offsets = fpm.led_offsets(69)
    assert len(offsets) == 69 and offsets[0] == (0, 0)

    optics = fpm.Optics()
    assert abs(optics.high_res_pitch_um() - 0.1625) < 1e-12

    obj = fpm.phantom("blobs", 32, count=4, feature_scale_um=1.3, seed=3)
    assert obj.shape == (32, 32) and obj.dtype == np.complex128

    stack = fpm.simulate(obj)
    assert stack.shape == (69, 16, 16)
    assert stack.min() >= 0.0

    one_hot = np.zeros(69)
    one_hot[5] = 1.0
    image = fpm.pattern_image(stack, list(one_hot), exposure_ms=2000.0)
    assert np.array_equal(image, stack[5])

    recon, pupil_phase, history = fpm.reconstruct_stack(
        stack, iterations=60, patch_grid=(1, 1)
    )
    assert recon.shape == (32, 32) and recon.dtype == np.complex128
    assert pupil_phase.shape == (16, 16)
    assert history.shape == (60,)
    assert history[-1] < 0.5 * history[0], f"loss {history[0]} -> {history[-1]}"

    mask = fpm.passband(32)
    err = fpm.spectral_error(recon, obj, mask)
    assert np.isfinite(err)

    scene = 100.0 * stack[0]
    repeats = np.stack(
        [fpm.add_noise(scene, seed=k, quantize=False) for k in range(80)]
    )
    slope, scale = fpm.calibrate(repeats)
    assert 0.3 < slope < 0.55, f"calibrated slope {slope}"
    assert abs(scale - 1.0 / slope**2) < 1e-9

    try:
        fpm.phantom("nope", 32)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown phantom kind should raise ValueError")

    print("smoke test passed")
    print(f"  illumination NA {na:.6f}, recon loss {history[0]:.3e} -> {history[-1]:.3e}")
    print(f"  calibrated slope {slope:.4f} (scale m {scale:.3f})")


if __name__ == "__main__":
    main()
