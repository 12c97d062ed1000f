"""Smoke test for the fpnet_py extension.

Build first:  cargo build --release -p fpnet-py --features extension-module
Then run:     python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import os
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def load():
    lib = os.environ.get("FPNET_PY_LIB") or str(ROOT / "target" / "release" / "libfpnet_py.so")
    loader = importlib.machinery.ExtensionFileLoader("fpnet_py", lib)
    spec = importlib.util.spec_from_file_location("fpnet_py", lib, loader=loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def main():
    fp = load()

    w, alpha, kappa = fp.mixing("ring", 6)
    assert all(abs(sum(row) - 1.0) < 1e-12 for row in w)
    assert 0.0 < kappa <= 1.0 and alpha > 0.0

    c1 = fp.Compressor("c1", 30, l_bits=2)
    assert c1.bit_cost() == 154.0
    assert fp.Compressor("c2", 30).bit_cost() == 240.0
    decoded, bits = c1.roundtrip([0.5] * 30, seed=1)
    assert len(decoded) == 30 and bits == 154
    assert c1.certify(trials=10_000, points=2)["status"] == "PASS"

    cfg = fp.Config.from_path(ROOT / "configs" / "fig1.toml").with_overrides([("run.horizon", "300")])
    trace = cfg.run()
    cols = trace.columns()
    assert len(trace) == 301 and cols["t"][-1] == 300
    assert cols["comm_rounds"][-1] == 100
    again = cfg.run()
    assert again.csv() == trace.csv()
    assert cfg.validate()["status"] in ("PASS", "WARN")

    try:
        cfg.with_overrides([("run.no_such_key", "1")])
    except fp.FpnetError as e:
        assert str(e).startswith("[config]")
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as d:
        manifest = fp.run_preset("fig3_h_sweep", [1, 2], d, [("run.horizon", "200")])
        assert fp.verify_manifest(manifest) == []
        csvs = [p for p in os.listdir(d) if p.endswith(".csv")]
        assert len(csvs) == 6, csvs

    print("smoke test ok")


if __name__ == "__main__":
    sys.exit(main())
