"""Smoke test of the Python bindings.

Build first:
    cargo build -p scannability-py --release --features extension-module
then run from the repository root:
    python3 python/smoke_test.py
"""

import glob
import importlib.util
import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        import pyscannability

        return pyscannability
    except ImportError:
        pass
    candidates = []
    for profile in ("release", "debug"):
        candidates += glob.glob(os.path.join(ROOT, "target", profile, "libpyscannability.so"))
        candidates += glob.glob(os.path.join(ROOT, "target", profile, "libpyscannability.dylib"))
    if not candidates:
        sys.exit("pyscannability not built; see the module docstring")
    tmp = tempfile.mkdtemp()
    target = os.path.join(tmp, "pyscannability.so")
    shutil.copy(candidates[0], target)
    spec = importlib.util.spec_from_file_location("pyscannability", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    sc = load_module()
    work = tempfile.mkdtemp()
    data = os.path.join(work, "data")

    n = sc.generate(data, users=30, seed=1, gamma=0.5, sigma=0.3)
    assert n > 300, n

    fit = sc.layout_regression(os.path.join(data, "trials.jsonl"))
    assert fit["names"][:4] == ["intercept", "y", "area", "n_candidates"], fit["names"]
    assert fit["coefficients"][1] > 0, fit["coefficients"]

    ckpt = os.path.join(work, "model.bin")
    val = sc.train(data, ckpt, seed=0, page_res=64, epochs=1, lr=1e-3)
    assert val == val and val > 0, val

    model = sc.Model.load(ckpt)
    assert model.version.startswith("v1-"), model.version
    assert model.page_res == 64 and not model.has_classifier

    with open(os.path.join(data, "trials.jsonl")) as f:
        rec = json.loads(f.readline())
    with open(os.path.join(data, rec["screenshot"]), "rb") as f:
        png = f.read()
    out = model.predict(png, rec["bbox"], rec["target_type"], rec["n_candidates"])
    assert out["grid"] == 8 and len(out["attention"]) == 64
    assert out["class_probs"] is None

    grid = model.whatif(png, rec["bbox"], rec["target_type"], rec["n_candidates"], 2, 3)
    assert len(grid["seconds"]) == 2 and len(grid["seconds"][0]) == 3

    try:
        model.predict(png, [1000, 0, 60, 30], "text", 10)
    except ValueError as e:
        assert "exceeds" in str(e), e
    else:
        raise AssertionError("out-of-page bbox accepted")

    checks = sc.gradcheck(seed=0, coords=20)
    assert all(c["passed"] for c in checks), [c for c in checks if not c["passed"]]

    print(f"ok: {n} trials, predicted {out['seconds']:.3f}s, {len(checks)} gradient checks")


if __name__ == "__main__":
    main()
