import json
import random

import numpy as np
import pytest
from filelock import FileLock
from hypothesis import given, settings
from hypothesis import strategies as st

from cdmatch import cli
from cdmatch import gmm
from cdmatch import harness as H
from cdmatch.guidance import GuidanceRun
from cdmatch.nets import load_json, save_json

TINY_NET = {"blocks": 1, "units": 8, "epochs": 20, "batch_size": 32, "lr": 1e-3}
TINY = {
    "setting": "2D", "runs": 3, "top_k": 2, "normalizer_n": 500,
    "uncond": TINY_NET, "cond": TINY_NET, "cm": {**TINY_NET, "s1": 40},
    "guidance": {"T_outer": 3, "n_mc": 1, "n_cond": 16, "n_target": 16, "reeval_n": 50, "zeta": 0.3},
    "teacher_steps": 2,
    "sweep": {"n_samples": 20, "ddim_steps": 3, "prior": TINY_NET, "schedule": {"kind": "linear", "T": 50}},
    "diagnose": {"concentration_n": [10, 20, 40], "concentration_repeats": 3, "gradient_n": [10, 20, 40],
                 "gradient_repeats": 3, "memory_K": [1, 2], "memory_n_cond": 4, "fidelity_inputs": 4,
                 "fidelity_directions": 2, "counterexample_eps": [0.2, 0.05], "bootstrap": 20},
}


def tiny_config(tmp_path, **over) -> str:
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**TINY, **over}))
    return str(p)


# ---- ecdf and selection

def test_ecdf_examples():
    assert H.ecdf_export([3, 1, 2]) == [(1.0, 1 / 3), (2.0, 2 / 3), (3.0, 1.0)]
    assert H.ecdf_export([0.5]) == [(0.5, 1.0)]
    assert H.ecdf_export([2, 1, 2, 2]) == [(1.0, 0.25), (2.0, 1.0)]
    with pytest.raises(ValueError):
        H.ecdf_export([])


def _rows(n, rng):
    return [{"seed": f"s{i}", "failed": bool(rng.random() < 0.2), "final_loss": float(rng.integers(0, 5)),
             "l2_gmm": 0.1, "l2_xstar": 0.2, "wall_time": 1.0} for i in range(n)]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 15), st.integers(0, 2**31))
def test_top_k_is_order_invariant_subset(n, k, seed):
    rows = _rows(n, np.random.default_rng(seed))
    shuffled = list(rows)
    random.Random(seed).shuffle(shuffled)
    top = H.select_top(rows, k)
    assert top == H.select_top(shuffled, k)
    assert all(r in rows and not r["failed"] for r in top)
    worst = max((r["final_loss"] for r in top), default=None)
    rest = [r for r in rows if not r["failed"] and r not in top]
    assert len(top) == min(k, sum(not r["failed"] for r in rows))
    assert all(r["final_loss"] >= worst for r in rest)


def test_evaluate_point_at_optimum_is_zero():
    bench = gmm.build_benchmark("2D")
    l2, dist = H.evaluate_point(bench, bench.x_star)
    assert abs(l2) <= 1e-10 and dist == 0.0


# ---- configuration

def test_config_precedence_preset_then_file_then_flags(tmp_path):
    path = tiny_config(tmp_path, seed=4)
    cfg = H.load_config(path, seed=9)
    assert cfg.seed == 9 and cfg.runs == 3
    assert cfg.cond.units == 8
    # nested keys not in the file keep their preset value
    assert cfg.cond.weight_decay == H.NetBudget().weight_decay
    assert H.load_config(scale="paper").cond.epochs == 20_000


@pytest.mark.parametrize("content,needle", [
    ({"runs": 0}, "runs"),
    ({"uncond": {"units": -1}}, "uncond.units"),
    ({"bogus": 1}, "bogus"),
    ({"guidance": {"beta": -1.0}}, "guidance"),
    ({"setting": "3D"}, "setting"),
])
def test_config_errors_name_the_field(tmp_path, content, needle):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(content))
    with pytest.raises(H.ConfigError, match=needle):
        H.load_config(p)


def test_config_file_errors(tmp_path):
    with pytest.raises(H.ConfigError, match="not found"):
        H.load_config(tmp_path / "missing.json")
    p = tmp_path / "broken.json"
    p.write_text("{runs: 3")
    with pytest.raises(H.ConfigError, match="JSON"):
        H.load_config(p)
    with pytest.raises(H.ConfigError):
        H.load_config(scale="huge")


def test_guidance_config_per_method():
    cfg = H.load_config(runs=7)
    assert cfg.guidance_config("mlgd-f").inner == "cm_single"
    t = cfg.guidance_config("mlgd-teacher")
    assert t.inner == "teacher" and t.teacher_steps == cfg.teacher_steps and t.restarts == 7
    with pytest.raises(H.ConfigError):
        cfg.guidance_config("sgd")


def test_named_streams_are_stable_and_distinct():
    a = H.stream(0, "train-cm").generate_state(4)
    assert np.array_equal(a, H.stream(0, "train-cm").generate_state(4))
    assert not np.array_equal(a, H.stream(0, "train-cond").generate_state(4))
    assert not np.array_equal(a, H.stream(1, "train-cm").generate_state(4))


# ---- cli exit codes

def test_cli_config_error_exits_2(tmp_path, capsys):
    assert cli.main(["report", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_report_on_empty_directory_exits_3(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path / "empty")]) == cli.EXIT_RUN
    assert "no runs" in capsys.readouterr().err


def test_cli_missing_checkpoint_exits_3(tmp_path, capsys):
    assert cli.main(["optimize", "--out", str(tmp_path)]) == cli.EXIT_RUN
    assert "missing checkpoint" in capsys.readouterr().err


def test_cli_refuses_a_locked_output_directory(tmp_path, capsys):
    out = tmp_path / "busy"
    out.mkdir()
    with FileLock(str(out / ".lock")):
        assert cli.main(["report", "--out", str(out)]) == cli.EXIT_RUN
    assert "in use" in capsys.readouterr().err


def test_cli_rejects_unknown_command():
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2


# ---- report from hand-made run artifacts

def _write_runs(cfg, method, xs, losses):
    d = H.run_dir(cfg, method)
    d.mkdir(parents=True, exist_ok=True)
    for i, (x, loss) in enumerate(zip(xs, losses)):
        failed = x is None
        run = GuidanceRun([i], None if failed else [x], [None], 0.5 + i, method=method, failed=failed,
                          fail_step=0 if failed else None, final_loss=None if failed else loss)
        save_json(run.to_dict(), d / f"run_{i:02d}.json")


def test_report_table_shape_and_top_k(tmp_path):
    cfg = H.load_config(out=str(tmp_path), top_k=2)
    xs = [-5.0, -4.0, 1.0, None, -5.5]
    _write_runs(cfg, "mlgd-f", xs, [0.1, 0.2, 0.9, None, 0.15])
    _write_runs(cfg, "mlgd-teacher", xs, [0.3, 0.1, 0.2, None, 0.4])
    table = H.report(cfg)
    assert [(r["subset"], r["method"]) for r in table] == [
        ("all", "mlgd-f"), ("top2", "mlgd-f"), ("all", "mlgd-teacher"), ("top2", "mlgd-teacher")]
    assert all(np.isfinite(r["l2_gmm_mean"]) and r["failed"] == 1 for r in table)
    top_f = table[1]
    bench = gmm.build_benchmark("2D")
    expect = np.mean([H.evaluate_point(bench, [x])[0] for x in (-5.0, -5.5)])
    assert top_f["l2_gmm_mean"] == pytest.approx(expect)
    summary = H.read_csv(tmp_path / "summary.csv")
    assert len(summary) == 4 and "time_mean" not in summary[0]
    assert len(H.read_csv(tmp_path / "timing.csv")) == 4
    ecdf = H.read_csv(tmp_path / "ecdf_mlgd-f.csv")
    assert len(ecdf) == 4 and float(ecdf[-1]["fraction"]) == 1.0


def test_report_rejects_method_with_only_failures(tmp_path):
    cfg = H.load_config(out=str(tmp_path))
    _write_runs(cfg, "mlgd-f", [None, None], [None, None])
    with pytest.raises(H.RunFailure, match="all runs"):
        H.report(cfg)


def test_run_artifact_round_trip(tmp_path):
    run = GuidanceRun([1, 2], [0.5], [1.0, None], 2.5, 10, 20, 30, "abc", "mlgd-f", final_loss=0.1)
    save_json(run.to_dict(), tmp_path / "r.json")
    assert GuidanceRun.from_dict(load_json(tmp_path / "r.json")) == run


# ---- end-to-end with tiny budgets

def _pipeline(tmp_path, name):
    out = str(tmp_path / name)
    path = tiny_config(tmp_path)
    for cmd in ("train-uncond", "train-cond", "train-cm", "optimize"):
        assert cli.main([cmd, "--config", path, "--out", out]) == 0, cmd
    return tmp_path / name


def test_tiny_pipeline_is_byte_deterministic(tmp_path, capsys):
    a = _pipeline(tmp_path, "a")
    b = _pipeline(tmp_path, "b")
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    for name in ("uncond", "cond", "cm"):
        assert (a / "checkpoints" / f"{name}.json").read_bytes() == (b / "checkpoints" / f"{name}.json").read_bytes()
    rows = H.read_csv(a / "summary.csv")
    assert len(rows) == 4
    assert len(list((a / "runs" / "mlgd-f").glob("run_*.json"))) == 3
    # evaluate and report are pure functions of the run artifacts
    before = (a / "summary.csv").read_bytes()
    assert cli.main(["report", "--config", str(tmp_path / "cfg.json"), "--out", str(a)]) == 0
    assert (a / "summary.csv").read_bytes() == before
    capsys.readouterr()


def test_tiny_checkpoints_round_trip(tmp_path):
    a = _pipeline(tmp_path, "rt")
    for name, kind in (("uncond", "ddpm"), ("cond", "ddpm"), ("cm", "ict")):
        m = H._load_model(a / "checkpoints" / f"{name}.json", kind)
        assert m.to_dict() == load_json(a / "checkpoints" / f"{name}.json")
    with pytest.raises(H.RunFailure, match="expected"):
        H._load_model(a / "checkpoints" / "cm.json", "ddpm")


def test_tiny_sweep_and_diagnose(tmp_path, capsys):
    path = tiny_config(tmp_path, setting="toy")
    out = str(tmp_path / "sw")
    assert cli.main(["sweep-beta", "--config", path, "--out", out]) == 0
    rows = H.read_csv(tmp_path / "sw" / "sweep" / "sweep.csv")
    assert [float(r["beta"]) for r in rows] == [0.0, 10.0, 100.0, 1000.0]
    assert all(np.isfinite(float(r["w1"])) for r in rows)
    assert cli.main(["diagnose", "--config", path, "--out", out]) == 0
    summary = json.loads((tmp_path / "sw" / "diagnostics" / "summary.json").read_text())
    assert "concentration_slope" in summary and "fidelity_ratio" in summary
    capsys.readouterr()
