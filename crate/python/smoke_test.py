"""Smoke test for the stripbp Python bindings.

Build the extension first:

    cargo build --release -p stripbp-python --features extension-module

then run `python3 python/smoke_test.py`. The script loads the shared library
from target/release (override with STRIPBP_PY_LIB).
"""

import importlib.util
import json
import math
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    lib = os.environ.get("STRIPBP_PY_LIB")
    if lib is None:
        for name in ("libstripbp_py.so", "libstripbp_py.dylib", "stripbp_py.dll"):
            candidate = ROOT / "target" / "release" / name
            if candidate.exists():
                lib = str(candidate)
                break
    if lib is None:
        sys.exit("extension not built; see the module docstring")
    tmp = pathlib.Path(tempfile.mkdtemp())
    suffix = ".pyd" if lib.endswith(".dll") else ".so"
    target = tmp / ("stripbp_py" + suffix)
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("stripbp_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    sb = load_module()
    failures = []

    def check(name, ok):
        print(("ok   " if ok else "FAIL ") + name)
        if not ok:
            failures.append(name)

    m3 = sb.Model.example1(x=3.0)
    check("model has two phases", m3.d == 2)
    check("params round trip", m3.params()["x"] == 3.0)

    q = sb.q_global(m3)
    qa1 = sb.q_of_a(m3, [1])
    qa2 = sb.q_of_a(m3, [2])
    qt = sb.q_partial(m3)
    roots = [q.root(), qa1.root(), qa2.root(), qt.root()]
    check("ordering q < q(A1) < q(A2) < q_partial", all(a < b for a, b in zip(roots, roots[1:])))
    check("q(A2) root value", close(qa2.root(), 0.933474, 1e-5))
    check("residual small", q.residual < 1e-7)

    binary = sb.Model.from_json(
        json.dumps(
            {
                "d": 1,
                "custom_levels": [
                    [
                        {
                            "atoms": [
                                {"prob": 0.6, "children": [{"level": 0, "phase": 1, "count": 2}]},
                                {"prob": 0.4, "children": []},
                            ]
                        }
                    ]
                ],
                "tail_rule": "sterile",
            }
        )
    )
    check("binary closed form 2/3", close(sb.q_global(binary).root(), 2.0 / 3.0, 1e-7))

    chain = sb.Model.chain()
    mu = (1.0 - math.sqrt(1.0 - 4 * 0.2)) / (2 * 0.2)
    check("chain step-up limit", close(chain.step_up(200)[0][0], mu, 1e-4))

    partial = sb.partial_criterion(sb.Model.example1(x=1.0))
    check("partial criterion fails at x=1", partial["verdict"] == "fails")
    check("sufficient conditions at x=3", sb.sufficient_conditions(m3, [2])["verdict"] == "holds")

    scan = sb.s0_scan(sb.Model.example2(), h=1.0 / 64.0, depth=200)
    check("scan marks members", all(p["member"] for p in scan["marked"]))

    est = sb.simulate(m3, [1, 2], trials=2000, seed=7)
    check("monte carlo within 4 sigma", abs(est["estimate"] - q.root()) < 4 * est["standard_error"])

    try:
        sb.q_of_a(m3, [3])
        check("rejects phase 3", False)
    except ValueError:
        check("rejects phase 3", True)

    if failures:
        sys.exit(f"{len(failures)} failure(s)")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
