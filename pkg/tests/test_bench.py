import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import synthetic_record
from planseed.bench import (
    CSV_COLUMNS,
    aggregate,
    default_methods,
    evaluate,
    read_eval_csv,
    write_report_charts,
    write_report_csv,
)
from planseed.config import load_config
from planseed.data import write_dataset
from planseed.diffusion import create_net, make_schedule, save_checkpoint

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "default.yaml"


def make_row(problem_id, method, success, plan=0.1, esdf=0.02, jerk=5.0, motion=1.0,
             terr=0.001, aerr=0.5, sweep=50):
    return {
        "problem_id": problem_id, "method": method, "sweep_value": sweep,
        "success": success, "plan_time_s": repr(plan), "esdf_time_s": repr(esdf),
        "jerk": repr(jerk), "motion_time_s": repr(motion), "trans_err_m": repr(terr),
        "angle_err_deg": repr(aerr), "collision_free": success,
        "graph_used_in_expert": 0,
    }


class TestAggregate:
    def test_single_success_row(self):
        rep = aggregate([make_row(0, "m", 1, plan=0.25, jerk=7.0)])
        r = rep[0]
        assert r["n_problems"] == 1 and r["success_rate"] == 1.0
        assert r["plan_time_mean_all"] == 0.25
        assert r["plan_time_p98_all"] == 0.25
        assert r["jerk_mean_success"] == 7.0

    def test_all_failures_absent_quality(self):
        rep = aggregate([make_row(i, "m", 0) for i in range(5)])
        r = rep[0]
        assert r["success_rate"] == 0.0
        assert r["jerk_mean_success"] == ""
        assert r["trans_err_m_mean_success"] == ""

    def test_quantile_order_statistics(self):
        rows = [make_row(i, "m", 1, plan=float(i + 1)) for i in range(100)]
        rep = aggregate(rows)[0]
        assert rep["plan_time_p98_all"] == pytest.approx(98.02)
        assert rep["plan_time_p75_all"] == pytest.approx(75.25)

    def test_latency_over_all_quality_over_successes(self):
        rows = [make_row(0, "m", 1, plan=1.0, jerk=10.0),
                make_row(1, "m", 0, plan=3.0, jerk=999.0)]
        rep = aggregate(rows)[0]
        assert rep["plan_time_mean_all"] == 2.0     # failures included in latency
        assert rep["jerk_mean_success"] == 10.0     # but excluded from quality

    def test_matches_spreadsheet_recomputation(self):
        rng = np.random.default_rng(3)
        rows = []
        for i in range(20):
            rows.append(make_row(i, "m", int(rng.random() < 0.7),
                                 plan=float(rng.uniform(0.1, 2.0)),
                                 jerk=float(rng.uniform(1, 50))))
        rep = aggregate(rows)[0]
        plans = sorted(float(r["plan_time_s"]) for r in rows)
        # manual linear-interpolation quantile
        def quant(p):
            h = (len(plans) - 1) * p
            lo = int(np.floor(h))
            return plans[lo] + (h - lo) * (plans[min(lo + 1, len(plans) - 1)] - plans[lo])
        assert rep["plan_time_p75_all"] == pytest.approx(quant(0.75))
        assert rep["plan_time_p98_all"] == pytest.approx(quant(0.98))
        succ = [r for r in rows if r["success"]]
        assert rep["success_rate"] == pytest.approx(len(succ) / 20)
        assert rep["jerk_mean_success"] == pytest.approx(
            np.mean([float(r["jerk"]) for r in succ]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestEvaluate:
    def setup_method(self):
        self.cfg = load_config(CONFIG)
        rng = np.random.default_rng(5)
        self.records = [synthetic_record(rng, self.cfg.arm) for _ in range(3)]
        self.net = create_net(self.cfg.arch, seed=1)
        self.schedule = make_schedule(self.cfg.schedule.K, self.cfg.schedule.beta_start,
                                      self.cfg.schedule.beta_end)

    def fast_methods(self):
        from planseed.bench import MethodSpec
        return [
            MethodSpec(name="diffusion-niters5", kind="diffusion", sweep_value=5,
                       n_iters=5, n_trajs=2),
            MethodSpec(name="linear-niters5", kind="linear", sweep_value=5,
                       n_iters=5, n_trajs=2),
        ]

    def test_rows_schema_and_count(self, tmp_path):
        out = tmp_path / "raw.csv"
        rows = evaluate(self.cfg, self.records, self.fast_methods(), self.net,
                        self.schedule, seed=3, out_csv=out)
        assert len(rows) == 6
        with open(out) as f:
            header = f.readline().strip().split(",")
        assert header == CSV_COLUMNS
        back = read_eval_csv(out)
        assert len(back) == 6
        assert {r["method"] for r in back} == {"diffusion-niters5", "linear-niters5"}

    def test_deterministic_apart_from_timing(self, tmp_path):
        r1 = evaluate(self.cfg, self.records, self.fast_methods(), self.net,
                      self.schedule, seed=3, out_csv=None)
        r2 = evaluate(self.cfg, self.records, self.fast_methods(), self.net,
                      self.schedule, seed=3, out_csv=None)
        skip = {"plan_time_s", "esdf_time_s"}  # wall-clock fields
        for a, b in zip(r1, r2):
            for k in CSV_COLUMNS:
                if k not in skip:
                    assert a[k] == b[k], k

    def test_empty_problem_set_rejected(self):
        with pytest.raises(ValueError):
            evaluate(self.cfg, [], self.fast_methods(), self.net, self.schedule,
                     seed=0, out_csv=None)


class TestDefaultMethods:
    def test_grid_covers_acceptance_methods(self):
        cfg = load_config(CONFIG)
        names = {m.name for m in default_methods(cfg)}
        for needed in ("diffusion-niters50", "linear-niters50", "linear-niters475",
                       "linear-natp1", "linear-natp10", "graph-natp10",
                       "diffusion-ntrajs1", "diffusion-ntrajs4"):
            assert needed in names


class TestReportFiles:
    def test_report_csv_and_svg(self, tmp_path):
        rows = [make_row(i, m, int(i % 2 == 0), plan=0.1 * (i + 1))
                for m in ("a", "b") for i in range(4)]
        rep = aggregate(rows)
        write_report_csv(rep, tmp_path / "report.csv")
        with open(tmp_path / "report.csv") as f:
            back = list(csv.DictReader(f))
        assert len(back) == 2
        assert float(back[0]["success_rate"]) == 0.5
        write_report_charts(rep, tmp_path)
        svg = (tmp_path / "success_rate.svg").read_text()
        assert svg.startswith("<svg") and "</svg>" in svg
        assert (tmp_path / "plan_time_quantiles.svg").exists()


class TestCli:
    def run_cli(self, *args):
        return subprocess.run(
            [sys.executable, "-m", "planseed.cli", "--config", str(CONFIG), *args],
            capture_output=True, text=True)

    def test_plan_prints_json(self, tmp_path, arm):
        rng = np.random.default_rng(7)
        records = [synthetic_record(rng, arm)]
        data = tmp_path / "set.ds"
        write_dataset(records, data, arm)
        ckpt = tmp_path / "net.ckpt"
        cfg = load_config(CONFIG)
        save_checkpoint(ckpt, create_net(cfg.arch, seed=0),
                        make_schedule(100, 1e-3, 8e-2), {})
        out = self.run_cli("plan", "--data", str(data), "--ckpt", str(ckpt),
                           "--method", "linear-niters50", "--seed", "1")
        assert out.returncode == 0, out.stderr
        d = json.loads(out.stdout)
        assert d["seeder"] == "linear"
        assert len(d["trajectory"]) == 32

    def test_eval_on_empty_set_errors(self, tmp_path, arm):
        data = tmp_path / "empty.ds"
        write_dataset([], data, arm)
        out = self.run_cli("eval", "--data", str(data), "--out", str(tmp_path / "x.csv"),
                           "--methods", "linear")
        assert out.returncode == 2
        assert "error in eval" in out.stderr

    def test_unknown_method_errors(self, tmp_path, arm):
        rng = np.random.default_rng(8)
        data = tmp_path / "set.ds"
        write_dataset([synthetic_record(rng, arm)], data, arm)
        out = self.run_cli("plan", "--data", str(data), "--method", "warp-drive")
        assert out.returncode == 2
        assert "unknown method" in out.stderr

    def test_gen_scenes_writes_worlds(self, tmp_path):
        out = self.run_cli("gen-scenes", "--out", str(tmp_path / "w"), "--count", "1",
                           "--seed", "5")
        assert out.returncode == 0, out.stderr
        files = sorted((tmp_path / "w").glob("*.json"))
        assert len(files) == 3  # one per kind
        doc = json.loads(files[0].read_text())
        assert "obstacles" in doc and "bounds" in doc

    def test_report_roundtrip(self, tmp_path):
        raw = tmp_path / "raw.csv"
        with open(raw, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for i in range(6):
                w.writerow(make_row(i, "linear-niters50", int(i % 2 == 0)))
        out = self.run_cli("report", "--in", str(raw), "--out-dir", str(tmp_path / "rep"))
        assert out.returncode == 0, out.stderr
        assert (tmp_path / "rep" / "report.csv").exists()
        assert (tmp_path / "rep" / "success_rate.svg").exists()
