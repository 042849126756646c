"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed in the
terminal summary (and by ``python tests/test_acceptance.py``).
"""
import csv
import json
import time

import numpy as np
import pytest

from utune import tensor as tn
from utune.backbone import Backbone, BackboneConfig
from utune.checkpoint import load_tensors
from utune.cli import main
from utune.composer import compose, enumerate_ablation_grid
from utune.training import desk_transfer
from utune.verify import deep_prompt_sweep, zero_init_identity

RESULTS = {}


def record(n, passed, detail):
    RESULTS[n] = (bool(passed), detail)
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
    return passed


def _report(out, command):
    return json.loads((out / f"{command}.json").read_text())


@pytest.fixture(scope="module")
def equivalence_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("equiv")
    code = main(["verify-equivalence", "--out", str(out), "--seed", "0"])
    return code, _report(out, "verify-equivalence")


def test_criterion_1_equivalence(equivalence_report):
    code, rep = equivalence_report
    eq = [c for c in rep["cases"] if c["name"].startswith("equivalence/")]
    counts = {k: sum(c["name"].startswith(f"equivalence/{k}-") for c in eq) for k in ("prefix", "prompt", "adapter")}
    worst = rep["extra"]["worst_max_abs_diff"]
    both_modes = all(set(c["details"]["by_mode"]) == {"discard", "keep"} for c in eq if "by_mode" in c["details"])
    ok = (code == 0 and counts == {"prefix": 100, "prompt": 100, "adapter": 100} and both_modes
          and worst["prefix"] < 1e-9 and worst["prompt"] < 1e-9 and worst["adapter"] < 1e-12
          and rep["wall_time_s"] < 10)
    record(1, ok, f"cases={counts} worst={ {k: f'{v:.1e}' for k, v in worst.items()} } "
                  f"time={rep['wall_time_s']:.2f}s")
    assert ok


def test_criterion_2_gate_reconstruction(equivalence_report):
    _, rep = equivalence_report
    gates = [c for c in rep["cases"] if c["name"].startswith("gate/")]
    open_unit = all(c["details"]["gate_in_open_unit"] for c in gates)
    worst = max(c["value"] for c in gates)
    ok = len(gates) == 200 and open_unit and worst < 1e-12 and all(c["passed"] for c in gates)
    record(2, ok, f"gated cases={len(gates)} all gates in (0,1)={open_unit} worst reconstruction={worst:.1e}")
    assert ok


def test_criterion_3_gradients(tmp_path):
    code = main(["grad-check", "--out", str(tmp_path)])
    rep = _report(tmp_path, "grad-check")
    rel = [c for c in rep["cases"] if c["metric"] == "rel_err"]
    frozen = [c for c in rep["cases"] if "frozen-after-10-adamw-steps" in c["name"]]
    configs = rep["args"]["configs"]
    singles = [c for c in configs if c.startswith("single-")]
    worst = max(c["value"] for c in rel)
    ok = (code == 0 and len(singles) == 9 and "dual-mha_adapter-ffn_adapter" in configs
          and len(frozen) == len(configs) and all(c["passed"] for c in rep["cases"]) and worst < 1e-4
          and rep["wall_time_s"] < 60)
    record(3, ok, f"configs={len(configs)} tensors={len(rel)} worst rel err={worst:.1e} "
                  f"frozen audits={len(frozen)} time={rep['wall_time_s']:.1f}s")
    assert ok


def test_criterion_4_param_counts(tmp_path):
    code = main(["count-params", "--backbone", "vitb16", "--out", str(tmp_path), "--sweep"])
    rep = _report(tmp_path, "count-params")
    ref = rep["extra"]["reference"]
    lp, vpt = ref["linear_probe"], ref["deep_prompt_n10"]
    sweep = [c for c in rep["cases"] if c["name"].startswith("deep-prompt/")]
    ok = (code == 0 and lp["count"] == 76_900 and abs(lp["millions"] - 0.07) <= 0.01
          and vpt["count"] == 169_060 and abs(vpt["millions"] - 0.17) <= 0.01
          and len(sweep) == 27 and all(c["passed"] for c in sweep))
    record(4, ok, f"linear probe={lp['count']:,} ({lp['millions']:.3f}M vs 0.07M) "
                  f"deep prompts n=10={vpt['count']:,} ({vpt['millions']:.3f}M vs 0.17M) sweep={len(sweep)}/27")
    assert ok


def test_criterion_5_zero_init_identity(pretrained_checkpoint, tmp_path):
    tensors, _ = load_tensors(pretrained_checkpoint)
    with tn.precision("f64"):
        bb = Backbone.build(BackboneConfig(), seed=0)
        bb.load_state_dict(tensors)
        grid = enumerate_ablation_grid()
        rep = zero_init_identity(bb, grid, batches=10, seed=0)
    worst = max(c.value for c in rep.cases)
    natural = sum(c.details["mode"] == "as-initialised" for c in rep.cases)
    stats_ok = True
    stat_diffs = []
    for name in ("dual-mha_adapter-ffn_adapter", "single-block-adapter", "tri-block_adapter",
                 "scaling-input_dependent"):
        cfg = next(c for c in grid if c.name == name)
        cfg_path = tmp_path / f"{name}.json"
        cfg.save(cfg_path)
        out = tmp_path / name
        code = main(["export-stats", "--config", str(cfg_path), "--backbone-checkpoint", str(pretrained_checkpoint),
                     "--out", str(out)])
        r = _report(out, "export-stats")
        stat_diffs.append(r["extra"]["max_abs_diff_vs_frozen"])
        stats_ok &= code == 0 and any(c["name"] == "stats/zero-init-identity" and c["passed"] for c in r["cases"])
    ok = rep.passed and len(rep.cases) == 25 and stats_ok
    record(5, ok, f"configs={len(rep.cases)} (as-initialised={natural}, zero-delta hook={25 - natural}) "
                  f"worst={worst:.1e}; export-stats worst stat diff={max(stat_diffs):.1e}")
    assert ok


def test_criterion_6_desk_transfer():
    start = time.perf_counter()
    with tn.precision("f32"):
        results = [desk_transfer(seed) for seed in (0, 1, 2)]
    elapsed = time.perf_counter() - start
    gaps = [r.gap * 100 for r in results]
    mean_gap = float(np.mean(gaps))
    ok = mean_gap >= 10 and min(gaps) >= 0 and elapsed < 300
    per_seed = ", ".join(f"seed {r.seed}: {r.tuned_test_acc:.3f} vs {r.probe_test_acc:.3f}" for r in results)
    record(6, ok, f"mean gap={mean_gap:.1f} points ({per_seed}) time={elapsed:.0f}s")
    assert ok


def test_criterion_7_grid_smoke(pretrained_checkpoint, tmp_path):
    code = main(["run-grid", "--epochs", "2", "--backbone-checkpoint", str(pretrained_checkpoint),
                 "--precision", "f32", "--out", str(tmp_path)])
    with open(tmp_path / "grid_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    reduced = [r for r in rows if r["status"] == "ok"
               and float(r["final_train_loss"]) < float(r["initial_train_loss"])]
    with tn.precision("f64"):
        bb = Backbone.build(BackboneConfig(), seed=0)
        grid = {c.name: c for c in enumerate_ablation_grid()}
        x = np.random.default_rng(3).normal(size=(4, 16, 64))
        direct = compose(bb, grid["scaling-direct"], seed=5)
        chan = compose(bb, grid["scaling-channel_wise"], seed=5)
        same_init = np.array_equal(direct(x).data, chan(x).data)
        rng = np.random.default_rng(9)
        for key, t in direct.tuners.items():
            for pname, v in t.module.variables().items():
                v.data = rng.normal(size=v.shape)
                chan.tuners[key].module.variables()[pname].data = v.data.copy()
        same_moved = np.array_equal(direct(x).data, chan(x).data)
    ok = code == 0 and len(rows) == 25 and len(reduced) == 25 and same_init and same_moved
    record(7, ok, f"configs run={len(rows)} loss reduced={len(reduced)}/25 "
                  f"direct==channel_wise(1): init={same_init}, random adapters={same_moved}")
    assert ok


def test_criterion_8_break_gate_negative_control(tmp_path):
    code = main(["verify-equivalence", "--break-gate", "--out", str(tmp_path)])
    rep = _report(tmp_path, "verify-equivalence")
    failed = [c for c in rep["cases"] if not c["passed"]]
    failed_eq = [c for c in failed if c["name"].startswith("equivalence/")]
    replays = sorted((tmp_path / "replay").glob("*.npz"))
    ok = code == 1 and not rep["summary"]["all_passed"] and len(failed_eq) > 0 and len(replays) > 0
    record(8, ok, f"exit code={code} failing cases={len(failed)} (equivalence {len(failed_eq)}) "
                  f"replay dumps={len(replays)}")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
