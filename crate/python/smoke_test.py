"""Exercises the Python bindings end to end on a small synthetic dataset.

Build and install first:
    pip install --no-build-isolation -e crates/py
"""

import math
import sys
import tempfile
from pathlib import Path

import ggograde_py as gg


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)


def main():
    check(gg.select_center_index(100, 0.25) == 25, "center index of 100 slices")
    check(gg.select_center_index(6, 0.25) == 2, "tie rounds to even")

    truth = [i % 4 for i in range(100)]
    check(gg.f1_macro(truth, truth) == 100.0, "perfect F1")
    check(abs(gg.f1_macro(truth, [0] * 100) - 10.0) < 1e-12, "one-class F1")
    flat = [[0.25] * 4 for _ in truth]
    check(gg.auroc_macro(flat, truth) == 50.0, "constant scores AUROC")
    report = gg.evaluate("smoke", [[0.1, 0.2, 0.6, 0.1]] * 8, [0, 1, 2, 3] * 2)
    check(report["pred_class_distribution"] == [0, 0, 8, 0], "collapsed distribution")

    try:
        gg.auroc_macro([[0.5, 0.5, 0.5, 0.5]], [0])
        check(False, "unnormalised scores accepted")
    except gg.GgogradeError:
        pass

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        info = gg.synth(str(tmp / "data"), scans_per_class=3, val_per_class=1, test_per_class=1, side=96)
        check(len(info["scans"]) == 20, "synthetic scan count")

        ds = gg.Dataset(str(tmp / "data"))
        check((ds.n_train, ds.n_unseen_val, ds.n_test) == (12, 4, 4), repr(ds))
        ds.write_manifest(str(tmp / "manifest.csv"))
        check(ds.verify_manifest(str(tmp / "manifest.csv")) == [], "manifest verifies")

        spec = gg.ModelSpec("SqueezeNet", init="scratch", input_size=64)
        model = gg.Model.build(spec, seed=1)
        before = model.checksum("backbone")
        model.freeze("last_layer_only")
        check(0 < model.trainable_count < model.param_count, "freeze leaves only the head trainable")
        check(model.checksum("backbone") == before, "freezing does not touch weights")

        preds = model.predict(ds, "test")
        check(len(preds) == ds.n_test, "one prediction per test scan")
        check(all(math.isclose(sum(p), 1.0, abs_tol=1e-9) for _, p in preds), "probabilities sum to one")

        cfg = gg.TrainConfig(batch_size=4, optimizer="SGD", lr=0.01, max_epochs=2, seed=3)
        check(cfg.settings == "BS4 SGD LR0.01", cfg.settings)
        outcome = gg.run_cell(spec, cfg, ds, results_root=str(tmp / "res"))
        check(outcome["status"] == "completed", str(outcome))
        ckpt = outcome["train"]["checkpoint_path"]
        reloaded = gg.Model.load(ckpt)
        check(reloaded.spec.arch == "SqueezeNet", "checkpoint arch")

        try:
            gg.ModelSpec("LeNet")
            check(False, "unknown architecture accepted")
        except ValueError:
            pass

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
