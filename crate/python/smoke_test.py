"""Smoke test for the narracap_py extension.

Build and install first:

    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/narracap_py-*.whl
    python python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

import narracap_py as nc


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    labels = nc.labels()
    check(len(labels) == 26 and labels[0] == "suffering" and labels[-1] == "sympathy", "taxonomy")

    got = nc.parse_labels("1. Happiness\n2. DOUBT / CONFUSION\n3. painting\n4. Peace.")
    check(got == ["doubt/confusion", "happiness", "peace"], f"parse_labels {got}")

    prompt = nc.build_prompt("A man in a park.", "top_labels")
    check(prompt.startswith("A man in a park. From suffering, pain,"), "build_prompt")
    try:
        nc.build_prompt(None, "six_labels")
        check(False, "caption required")
    except ValueError:
        check(True, "caption required")

    probs = nc.softmax([1.0, 2.0, 3.0])
    check(abs(sum(probs) - 1.0) < 1e-12, "softmax sums to one")
    check(nc.top_k(probs, 2) == [2, 1], "top_k")
    peaked = [0.9] + [0.1 / 99] * 99
    check(nc.above_threshold(peaked, 9.0) == [0], "above_threshold")
    check(nc.above_threshold([p * 100 for p in peaked], 9.0, percent=True) == [0], "percent scale")

    truth = [["happiness", "peace"], ["fear"]]
    report = nc.evaluate(truth, truth, resamples=100)
    check(report["hamming"] == 0.0 and report["subset_accuracy"] == 100.0, "evaluate")
    check(report["standard_errors"]["resamples"] == 100, "bootstrap SE present")

    counts = {name: 100 - i for i, name in enumerate(labels)}
    check(nc.majority(counts) == labels[:6], "majority")
    check(len(nc.random_six(1, 0)) == 6, "random_six")

    with tempfile.TemporaryDirectory() as tmp:
        fixture = Path(nc.synth(Path(tmp) / "fx", images=12))
        store = nc.EmbeddingStore.open(str(fixture / "store.nemb"))
        key = "img:synth_0000:full"
        check(key in store and len(store.get(key)) == store.dim, "EmbeddingStore")
        norm = math.sqrt(sum(v * v for v in store.get(key)))
        check(abs(norm - 1.0) < 1e-5, "unit norm")
        scores = store.score(key, ["text:emotions:0", "text:emotions:1"])
        check(abs(sum(scores) - 1.0) < 1e-9, "EmbeddingStore.score")

        reports = nc.run(
            "predict",
            dataset=fixture / "annotations.jsonl",
            store=str(fixture / "store.nemb"),
            out=Path(tmp) / "run",
            seed=1,
        )
        check(reports[0]["f1"] == 100.0 and reports[0]["n"] == 12, "run predict")
        rows = nc.run(
            "ablate",
            dataset=str(fixture / "annotations.jsonl"),
            store=str(fixture / "store.nemb"),
            out=str(Path(tmp) / "abl"),
            masks=["full", "no-signals"],
        )
        check(rows[1]["diff"] < 0, "run ablate")
        try:
            nc.run("predict", jobs=0)
            check(False, "config error")
        except ValueError:
            check(True, "config error")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
