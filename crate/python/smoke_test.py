#!/usr/bin/env python3
"""Smoke test for the neuroblend_py extension module.

Build the module first (see python/run_smoke.sh), then run with the
build directory on PYTHONPATH.
"""

import json
import sys

import neuroblend_py as nb


def check(cond, label):
    status = "ok" if cond else "FAIL"
    print(f"  [{status}] {label}")
    if not cond:
        sys.exit(f"smoke test failed at: {label}")


def main():
    print("build + validate")
    model = nb.build_model("neuroblend20", seed=7)
    check(model.node_count > 50, f"graph has {model.node_count} nodes")
    check(model.validate() == [], "no invariant violations")
    check(model.input_shape == [3, 32, 32], "input shape")

    print("compile")
    compiled, report_json = model.compile(word_size=64)
    report = json.loads(report_json)
    rewrites = sum(p["rewritten"] for p in report["passes"])
    check(compiled.compiled, "compiled flag set")
    check(rewrites >= 9, f"{rewrites} rewrites across the pipeline")
    check(compiled.validate() == [], "compiled graph validates")

    print("execute vs float reference")
    x = nb.seeded_input([3, 32, 32], seed=5)
    scores = compiled.run(x, workers=2)
    ref = model.reference([float(v) for v in x])
    check(len(scores) == 10 and len(ref) == 10, "ten class scores")
    worst = max(abs(a - b) for a, b in zip(scores, ref))
    check(worst <= 0.05, f"runtime tracks reference (max|d| = {worst:.4f})")
    argmax = max(range(10), key=lambda i: scores[i])
    ref_argmax = max(range(10), key=lambda i: ref[i])
    check(argmax == ref_argmax, f"argmax agreement (class {argmax})")

    print("determinism")
    again = compiled.run(x, workers=1)
    check(scores == again, "bit-identical across worker counts")

    print("save / load round-trip")
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.nblm")
        compiled.save(path)
        loaded = nb.Model.load(path)
        check(loaded.compiled, "loaded compiled model")
        check(loaded.run(x) == scores, "loaded model reproduces outputs")

    print("cost model")
    mixer = nb.build_model("mlpmixer-s4", seed=0)
    cost = json.loads(mixer.count())
    check(abs(cost["fpmac"] - 7.6e7) <= 0.1 * 7.6e7, f"mixer-s4 fixed FPMAC = {cost['fpmac']:.3e}")
    blend = nb.build_model("blendmixer-s4", seed=0)
    bcost = json.loads(blend.count())
    check(abs(bcost["bmac"] - 7.5e7) <= 0.1 * 7.5e7, f"blendmixer-s4 BMAC = {bcost['bmac']:.3e}")
    lat = json.loads(compiled.latency())
    check(lat["joint_parallelism"] == 16, "joint-domain parallelism gcd(32,48) = 16")

    print("smoke test passed")


if __name__ == "__main__":
    main()
