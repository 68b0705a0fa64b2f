"""Smoke test for the `flora` extension module.

Build first:
    cargo build -p flora-py --release
    cp target/release/libflora.so python/flora.so
then run:
    python3 python/smoke.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import flora  # noqa: E402


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok: {msg}")


def main():
    check("mobilenet" in flora.architectures(), "architectures listed")
    check(len(flora.optimizers()) == 7, "seven optimizers")

    counts = flora.param_count("mobilenet", head="gap", classes=16)
    check(counts["total"] == 3_245_264, f"mobilenet total {counts['total']}")
    check(counts["layers"] == 86, "mobilenet layer count")

    m = flora.macro_metrics([[8, 2], [3, 7]])
    check(abs(m["top1_accuracy"] - 0.75) < 1e-12, "macro metrics")

    try:
        flora.param_count("resnet")
    except flora.FloraError as e:
        check("unknown architecture" in str(e), "FloraError raised")
    else:
        raise SystemExit("FAIL: expected FloraError")

    model = flora.train("mini_mobilenet", "synth:3x6x32", optimizer="adam", epochs=3, batch_size=6, seed=1)
    check(len(model.history) == 3, "history has one record per epoch")
    h, w, c = model.input_shape
    probs = model.predict([0.5] * (2 * h * w * c))
    check(len(probs) == 2 and abs(sum(probs[0]) - 1.0) < 1e-5, "predict returns distributions")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        model.save(path)
        again = flora.Model.load(path)
        check(again.predict([0.5] * (h * w * c)) == model.predict([0.5] * (h * w * c)), "checkpoint round trip")

    metrics = model.evaluate("synth:3x4x32:9")
    check(0.0 <= metrics["top1_accuracy"] <= 1.0, "evaluate returns metrics")

    bench = model.benchmark(runs=5, warmup=1)
    check(bench["runs"] == 5 and bench["avg_ms"] > 0, "benchmark")

    try:
        model.classify(b"not an image")
    except flora.FloraError:
        check(True, "bad image rejected")
    else:
        raise SystemExit("FAIL: expected FloraError for bad image")

    print("smoke test passed")


if __name__ == "__main__":
    main()
