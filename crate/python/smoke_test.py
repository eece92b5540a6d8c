#!/usr/bin/env python3
"""End-to-end smoke test for the reason_py extension module.

Expects the shared library to exist already:

    cargo build --release -p reason-py

then run from anywhere:

    python3 python/smoke_test.py

Each stage prints an `ok:` line; any failure raises and exits nonzero.
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    names = ("libreason_py.so", "libreason_py.dylib", "reason_py.so")
    candidates = [
        ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in names
    ]
    src = next((c for c in candidates if c.exists()), None)
    if src is None:
        sys.exit("extension not built; run: cargo build --release -p reason-py")
    stage = Path(tempfile.mkdtemp(prefix="reason-py-"))
    shutil.copy2(src, stage / "reason_py.so")
    sys.path.insert(0, str(stage))
    import reason_py

    return reason_py


# Small planted world that trains in a couple of seconds.
CONFIG = {
    "seed": 3,
    "bank": {"planted": {"actions": 5, "concepts": 10}},
    "world": {"frames": 8, "joints": 8, "channels": 16, "text_dim": 16},
    "decoder": {"dim": 16, "hidden": 16, "spatial_groups": 2, "temporal_groups": 2},
    "logic": {"width": 8},
    "train": {
        "epochs": 4,
        "batch_size": 8,
        "warmup_detach_epochs": 1,
        "freeze_logic_epochs": 2,
    },
    "proj_dim": 8,
    "data": {"train_samples": 48, "eval_samples": 24},
}


def main():
    rp = load_module()
    checks = 0

    def ok(label):
        nonlocal checks
        checks += 1
        print(f"ok: {label}")

    cfg = rp.Config.from_json(json.dumps(CONFIG))
    assert len(cfg.hash) == 64
    assert rp.Config.from_json(cfg.to_json()).hash == cfg.hash
    reseeded = cfg.with_seed(9)
    assert reseeded.seed == 9
    assert reseeded.hash == cfg.hash, "the config hash must not depend on the seed"
    assert "Config" in repr(rp.Config.desk())
    ok("config round trip and seed-independent hash")

    try:
        rp.Config.from_json("{not json")
    except ValueError:
        ok("malformed config raises ValueError")
    else:
        raise AssertionError("malformed config was accepted")

    try:
        rp.Config.from_json(json.dumps({**CONFIG, "train": {"epochs": 0}}))
    except ValueError:
        ok("invalid config raises ValueError")
    else:
        raise AssertionError("zero-epoch config was accepted")

    ds = rp.Dataset.generate(cfg)
    assert sorted(ds.splits()) == ["eval", "train"]
    assert ds.num_samples("train") == 48 and ds.num_samples("eval") == 24
    feats = ds.features("eval", 0)
    assert len(feats) == 8 and len(feats[0]) == 8 and len(feats[0][0]) == 16
    assert 0 <= ds.label("eval", 0) < 5
    assert len(ds.true_concepts("eval", 0)) == 10
    assert len(ds.actions()) == 5 and len(ds.concepts()) == 10
    ok("dataset generation and shapes")

    with tempfile.TemporaryDirectory() as d:
        ds.save(d)
        loaded = rp.Dataset.load(d)
        assert loaded.config_hash == ds.config_hash
        assert loaded.features("eval", 5) == ds.features("eval", 5)
        assert loaded.label("train", 7) == ds.label("train", 7)
    ok("dataset save/load round trip")

    model, metrics = rp.Model.train(cfg)
    lines = [json.loads(l) for l in metrics.strip().splitlines()]
    assert [m["epoch"] for m in lines] == [1, 2, 3, 4]
    assert all("acc" in m and "active_weights" in m for m in lines)
    assert model.config_hash == cfg.hash and model.seed == 3
    ok("training emits one metrics line per epoch")

    pred = model.predict(feats)
    assert set(pred) == {"chat", "cbar", "representation", "scores", "predicted", "action"}
    assert all(b in (0, 1) for b in pred["cbar"])
    assert pred["action"] == model.actions()[pred["predicted"]]
    assert len(pred["scores"]) == 5
    ok("single-sample prediction")

    summary = model.evaluate(ds, "eval")
    assert summary["samples"] == 24
    assert 0.0 <= summary["accuracy"] <= 1.0
    assert 0.0 <= summary["concept_f1"] <= 1.0
    ok("batch evaluation")

    rules = json.loads(model.rules_json(3))
    assert len(rules["actions"]) == 5
    assert all(len(r["terms"]) == 3 for r in rules["actions"])
    ok("rule extraction")

    explained = model.explain(feats, 3)
    assert explained["predicted"] == pred["predicted"]
    weights = [abs(t["weight"]) for t in explained["terms"]]
    assert weights == sorted(weights, reverse=True)
    ok("instance explanation agrees with prediction")

    curve = model.intervention(ds, "eval", [0, 1, 2])
    assert [b for b, _ in curve] == [0, 1, 2]
    assert curve[0][1] == summary["accuracy"], "budget 0 must reproduce plain accuracy"
    assert all(0.0 <= a <= 1.0 for _, a in curve)
    ok("intervention curve starts at plain accuracy")

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        back = rp.Model.load(d)
        assert back.evaluate(ds, "eval") == summary
        reloaded = back.predict(feats)
        assert reloaded["predicted"] == pred["predicted"]
        # Checkpoints store tensors in 32-bit floats, so scores agree to
        # that precision rather than bit-for-bit.
        drift = max(abs(a - b) for a, b in zip(reloaded["scores"], pred["scores"]))
        assert drift < 1e-5, f"scores drifted {drift} through the checkpoint"
    ok("model save/load preserves predictions")

    model2, metrics2 = rp.Model.train(cfg)
    assert metrics2 == metrics, "identical config and seed must reproduce metrics"
    assert model2.rules_json(3) == model.rules_json(3)
    ok("retraining is deterministic")

    report = rp.gradcheck_report(component="sigmoid_bce", seed=1)
    assert len(report) == 1 and report[0]["pass"]
    full = rp.gradcheck_report()
    assert len(full) >= 10 and all(r["pass"] for r in full)
    ok("gradient checks pass through the bindings")

    try:
        rp.Model.load("/nonexistent/model/dir")
    except RuntimeError:
        ok("missing checkpoint raises RuntimeError")
    else:
        raise AssertionError("loading a missing checkpoint succeeded")

    try:
        ds.features("validation", 0)
    except ValueError as e:
        assert "train" in str(e) and "eval" in str(e)
        ok("unknown split names the available ones")
    else:
        raise AssertionError("unknown split was accepted")

    print(f"smoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
