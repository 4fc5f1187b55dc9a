"""Smoke test for the Python bindings.

Build first with `cargo build --release -p lgreg-py`. The script copies
target/release/libpylgreg.so next to a temporary import path when the module
is not installed.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_module():
    try:
        import pylgreg
        return pylgreg
    except ImportError:
        pass
    lib = ROOT / "target" / "release" / "libpylgreg.so"
    if not lib.exists():
        sys.exit(f"missing {lib}; run cargo build --release -p lgreg-py")
    tmp = Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / "pylgreg.so")
    sys.path.insert(0, str(tmp))
    import pylgreg
    return pylgreg


def main():
    lg = import_module()

    pair = lg.make_pair(size=16, seed=0)
    r, f, mono, gt = pair["reference"], pair["floating"], pair["floating_mono"], pair["gt"]
    assert r.shape == (16, 16, 16) and len(r) == 16**3
    lo, hi = r.min_max()
    assert 0.0 <= lo < hi <= 1.0

    neg = lg.Volume(f.shape, [1.0 - v for v in f.data()])
    a, b = lg.lg_similarity(r, f), lg.lg_similarity(r, neg)
    assert abs(a - b) <= 1e-6 * len(r), (a, b)
    assert lg.lcc_similarity(r, r) > lg.lcc_similarity(r, f)
    assert lg.mutual_information(r, r) > lg.mutual_information(r, f)
    assert lg.ngf(r, r) >= lg.ngf(r, f)

    assert lg.warp(r, lg.Field.zeros(r.shape)).data() == r.data()
    assert lg.rmse_percent(lg.warp(mono, gt), r) < lg.rmse_percent(mono, r)

    cfg = lg.Config()
    cfg.levels = [2, 1]
    cfg.iterations = 40
    cfg.lg_window = 3
    cfg.cc_window = 3
    cfg.mode = "full_alternating"
    cfg.validate()
    reg = lg.register(r, f, cfg)
    assert all(math.isfinite(t) for t in reg.totals())
    assert lg.endpoint_error(reg.field, gt) < lg.endpoint_error(lg.Field.zeros(r.shape), gt)
    assert reg.translator is not None and reg.translator.kind == "mlp"
    translated = reg.translator.translate(lg.warp(f, reg.field))
    assert translated.shape == r.shape
    json.loads(reg.report_json())

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "v.nii"
        r.save(path)
        back = lg.Volume.load(path)
        assert max(abs(x - y) for x, y in zip(back.data(), r.data())) < 1e-6
        reg.field.save(Path(d) / "u.raw")
        assert lg.Field.load(Path(d) / "u.raw").shape == r.shape
        model = lg.Translator.from_json(reg.translator.to_json())
        assert model.translate(f).data() == reg.translator.translate(f).data()

    try:
        lg.Volume.load("/nonexistent/volume.raw")
    except OSError:
        pass
    else:
        raise AssertionError("missing file must raise OSError")
    try:
        cfg.mode = "nonsense"
    except ValueError:
        pass
    else:
        raise AssertionError("bad mode must raise ValueError")

    passed, checks = lg.gradcheck(0)
    assert passed, checks

    print("python smoke test passed")


if __name__ == "__main__":
    main()
