"""Benchmark harness: method sweeps over a held-out problem set, per-problem CSV
rows, and aggregation into a report with latency quantiles and SVG charts."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .arm import ArmModel
from .config import ExperimentConfig
from .data import ProblemRecord
from .diffusion import DenoiserNet, NoiseSchedule
from .pipeline import GuidanceParams, PlanRequest, plan_baseline, plan_diffusion
from .trajopt import metrics

CSV_COLUMNS = [
    "problem_id", "method", "sweep_value", "success", "plan_time_s", "esdf_time_s",
    "jerk", "motion_time_s", "trans_err_m", "angle_err_deg", "collision_free",
    "graph_used_in_expert",
]


@dataclass(frozen=True)
class MethodSpec:
    """One benchmark column: a planner wired to its swept parameter value."""

    name: str
    kind: str            # diffusion | linear | graph
    sweep_value: int
    n_iters: int
    n_trajs: int
    n_atp: int = 1
    guided: bool = False


def default_methods(cfg: ExperimentConfig) -> List[MethodSpec]:
    ev = cfg.eval
    methods: List[MethodSpec] = []
    for n in ev.niters_sweep:
        methods.append(MethodSpec(name=f"diffusion-niters{n}", kind="diffusion",
                                  sweep_value=n, n_iters=n, n_trajs=ev.n_trajs))
    for k in ev.ntrajs_sweep:
        if k == ev.n_trajs and ev.n_iters_diffusion in ev.niters_sweep:
            continue  # identical to the diffusion-niters run at the default n_trajs
        methods.append(MethodSpec(name=f"diffusion-ntrajs{k}", kind="diffusion",
                                  sweep_value=k, n_iters=ev.n_iters_diffusion, n_trajs=k))
    for n in ev.niters_sweep:
        methods.append(MethodSpec(name=f"linear-niters{n}", kind="linear",
                                  sweep_value=n, n_iters=n, n_trajs=ev.n_trajs))
    for a in ev.natp_sweep:
        methods.append(MethodSpec(name=f"linear-natp{a}", kind="linear", sweep_value=a,
                                  n_iters=ev.n_iters_baseline, n_trajs=ev.n_trajs, n_atp=a))
    methods.append(MethodSpec(name=f"graph-natp{ev.graph_natp}", kind="graph",
                              sweep_value=ev.graph_natp, n_iters=ev.n_iters_baseline,
                              n_trajs=ev.n_trajs, n_atp=ev.graph_natp))
    return methods


def run_method(arm: ArmModel, net: Optional[DenoiserNet], schedule: Optional[NoiseSchedule],
               spec: MethodSpec, record: ProblemRecord, cfg: ExperimentConfig,
               seed: int):
    req = PlanRequest(
        q_start=record.problem.q_start,
        goal=record.problem.goal,
        scan=record.scans[0],
        n_trajs=spec.n_trajs,
        n_iters=spec.n_iters,
        n_denoising=cfg.eval.n_denoising,
        seed=seed,
        bounds=cfg.workspace,
        delta_t=cfg.eval.delta_t,
        delta_r_deg=cfg.eval.delta_r_deg,
    )
    if spec.kind == "diffusion":
        if net is None:
            raise ValueError("diffusion methods need a trained checkpoint")
        guidance = GuidanceParams() if spec.guided else None
        return plan_diffusion(arm, net, schedule, req, cfg.weights, guidance=guidance)
    return plan_baseline(arm, req, cfg.weights, seeder=spec.kind, n_atp=spec.n_atp)


def evaluate(
    cfg: ExperimentConfig,
    records: Sequence[ProblemRecord],
    methods: Sequence[MethodSpec],
    net: Optional[DenoiserNet],
    schedule: Optional[NoiseSchedule],
    seed: int,
    out_csv,
    progress_every: int = 0,
) -> List[dict]:
    """Run every method on every problem; write one CSV row per (problem, method).

    Ground-truth success is judged by `metrics` against the record's world;
    per-problem seeds derive from (seed, problem index) so each method sees the
    same randomness stream layout.
    """
    if len(records) == 0:
        raise ValueError("evaluation needs a nonempty problem set")
    rows: List[dict] = []
    for pi, rec in enumerate(records):
        for spec in methods:
            prob_seed = int(np.random.SeedSequence(entropy=(seed, pi)).generate_state(1)[0])
            res = run_method(cfg.arm, net, schedule, spec, rec, cfg, prob_seed)
            m = metrics(cfg.arm, rec.world, rec.problem.goal, res.trajectory,
                        plan_time=res.plan_time, delta_t=cfg.eval.delta_t,
                        delta_r_deg=cfg.eval.delta_r_deg)
            rows.append({
                "problem_id": pi,
                "method": spec.name,
                "sweep_value": spec.sweep_value,
                "success": int(m.success),
                "plan_time_s": repr(res.plan_time),
                "esdf_time_s": repr(res.esdf_time),
                "jerk": repr(m.max_jerk),
                "motion_time_s": repr(m.motion_time),
                "trans_err_m": repr(m.translation_error),
                "angle_err_deg": repr(m.angle_error_deg),
                "collision_free": int(m.collision_free),
                "graph_used_in_expert": int(rec.graph_used),
            })
        if progress_every and (pi + 1) % progress_every == 0:
            print(f"evaluated {pi + 1}/{len(records)} problems")
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows


def read_eval_csv(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ----------------------------------------------------------------------------
# Aggregation
# ----------------------------------------------------------------------------

REPORT_COLUMNS = [
    "method", "sweep_value", "n_problems", "n_successes", "success_rate",
    "plan_time_mean_all", "plan_time_p75_all", "plan_time_p98_all",
    "total_time_mean_all", "total_time_p75_all", "total_time_p98_all",
    "jerk_mean_success", "motion_time_mean_success",
    "trans_err_m_mean_success", "angle_err_deg_mean_success",
]


def aggregate(rows: Sequence[dict]) -> List[dict]:
    """Per-method aggregates: latency over all problems, quality over successes only.

    Quantiles use linear interpolation between order statistics. Methods with
    zero successes report empty quality fields.
    """
    if len(rows) == 0:
        raise ValueError("nothing to aggregate")
    order: List[str] = []
    groups: Dict[str, List[dict]] = {}
    for r in rows:
        if r["method"] not in groups:
            order.append(r["method"])
            groups[r["method"]] = []
        groups[r["method"]].append(r)
    out = []
    for method in order:
        g = groups[method]
        plan = np.array([float(r["plan_time_s"]) for r in g])
        esdf = np.array([float(r["esdf_time_s"]) for r in g])
        total = plan + esdf
        succ = [r for r in g if int(r["success"])]
        row = {
            "method": method,
            "sweep_value": g[0]["sweep_value"],
            "n_problems": len(g),
            "n_successes": len(succ),
            "success_rate": len(succ) / len(g),
            "plan_time_mean_all": float(plan.mean()),
            "plan_time_p75_all": float(np.percentile(plan, 75, method="linear")),
            "plan_time_p98_all": float(np.percentile(plan, 98, method="linear")),
            "total_time_mean_all": float(total.mean()),
            "total_time_p75_all": float(np.percentile(total, 75, method="linear")),
            "total_time_p98_all": float(np.percentile(total, 98, method="linear")),
        }
        for col, key in (("jerk_mean_success", "jerk"),
                         ("motion_time_mean_success", "motion_time_s"),
                         ("trans_err_m_mean_success", "trans_err_m"),
                         ("angle_err_deg_mean_success", "angle_err_deg")):
            row[col] = float(np.mean([float(r[key]) for r in succ])) if succ else ""
        out.append(row)
    return out


def write_report_csv(report: Sequence[dict], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(report)


# ----------------------------------------------------------------------------
# SVG charts (direct markup, no plotting dependency)
# ----------------------------------------------------------------------------

_PALETTE = ["#4878a8", "#e49444", "#5fa052", "#c44e52", "#8172b3", "#937860",
            "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd"]


def _svg_bar_chart(title: str, labels: Sequence[str], series: Dict[str, Sequence[float]],
                   y_label: str, width: int = 860, height: int = 420) -> str:
    ml, mr, mt, mb = 70, 20, 50, 120
    plot_w = width - ml - mr
    plot_h = height - mt - mb
    all_vals = [v for vals in series.values() for v in vals]
    vmax = max(all_vals) if all_vals else 1.0
    vmax = vmax * 1.1 if vmax > 0 else 1.0
    n_groups = len(labels)
    n_series = len(series)
    group_w = plot_w / max(n_groups, 1)
    bar_w = group_w * 0.8 / max(n_series, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<text x="16" y="{mt + plot_h / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {mt + plot_h / 2})">{y_label}</text>',
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = mt + plot_h * (1 - frac)
        parts.append(f'<line x1="{ml - 4}" y1="{y}" x2="{ml}" y2="{y}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4}" text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{frac * vmax:.3g}</text>')
    for gi, label in enumerate(labels):
        x0 = ml + gi * group_w + group_w * 0.1
        for si, (sname, vals) in enumerate(series.items()):
            v = vals[gi]
            h = plot_h * v / vmax
            x = x0 + si * bar_w
            y = mt + plot_h - h
            color = _PALETTE[si % len(_PALETTE)]
            parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
                         f'height="{h:.1f}" fill="{color}"/>')
        cx = ml + gi * group_w + group_w / 2
        parts.append(
            f'<text x="{cx:.1f}" y="{mt + plot_h + 12}" text-anchor="end" font-size="10" '
            f'font-family="sans-serif" transform="rotate(-40 {cx:.1f} {mt + plot_h + 12})">'
            f'{label}</text>')
    lx = ml
    for si, sname in enumerate(series):
        color = _PALETTE[si % len(_PALETTE)]
        parts.append(f'<rect x="{lx}" y="{height - 18}" width="12" height="12" fill="{color}"/>')
        parts.append(f'<text x="{lx + 16}" y="{height - 8}" font-size="11" '
                     f'font-family="sans-serif">{sname}</text>')
        lx += 16 + 9 * len(sname) + 24
    parts.append("</svg>")
    return "\n".join(parts)


def write_report_charts(report: Sequence[dict], out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [r["method"] for r in report]
    success_svg = _svg_bar_chart(
        "Success rate (ground-truth check)", labels,
        {"success rate": [r["success_rate"] for r in report]}, "fraction")
    (out_dir / "success_rate.svg").write_text(success_svg)
    latency_svg = _svg_bar_chart(
        "Planning latency over all problems", labels,
        {
            "mean": [r["plan_time_mean_all"] for r in report],
            "p75": [r["plan_time_p75_all"] for r in report],
            "p98": [r["plan_time_p98_all"] for r in report],
        }, "seconds")
    (out_dir / "plan_time_quantiles.svg").write_text(latency_svg)
