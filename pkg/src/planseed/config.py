"""Experiment configuration: one YAML document, two levels deep (section -> key)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from .arm import ArmModel, default_arm
from .data import GenConfig
from .diffusion import ArchConfig, TrainConfig, arch_for_arm
from .geometry import Rect, WORKSPACE
from .trajopt import CostWeights


@dataclass
class EvalConfig:
    n_problems: int = 200
    n_trajs: int = 12
    n_denoising: int = 5
    n_iters_diffusion: int = 50
    n_iters_baseline: int = 475
    delta_t: float = 0.005
    delta_r_deg: float = 2.86
    niters_sweep: Tuple[int, ...] = (50, 475)
    ntrajs_sweep: Tuple[int, ...] = (1, 4, 12)
    natp_sweep: Tuple[int, ...] = (1, 10)
    graph_natp: int = 10


@dataclass
class ScheduleConfig:
    K: int = 100
    beta_start: float = 1e-3
    beta_end: float = 8e-2


@dataclass
class ExperimentConfig:
    arm: ArmModel
    workspace: Rect
    arch: ArchConfig
    train: TrainConfig
    gen: GenConfig
    eval: EvalConfig
    schedule: ScheduleConfig
    weights: CostWeights
    paths: Dict[str, Path]
    seed: int = 0

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise KeyError(f"config has no paths.{key}")
        return self.paths[key]


_DEFAULT_PATHS = {
    "dataset": "artifacts/train.ds",
    "eval_set": "artifacts/eval.ds",
    "checkpoint": "artifacts/model.ckpt",
    "loss_csv": "artifacts/loss.csv",
    "eval_csv": "artifacts/eval_raw.csv",
    "report_dir": "artifacts/report",
    "scenes_dir": "artifacts/scenes",
}


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if sec is None:
        sec = {}
    if not isinstance(sec, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    return sec


def load_config(path) -> ExperimentConfig:
    """Parse the experiment YAML; unset keys fall back to the committed defaults."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}

    ws_sec = _section(doc, "workspace")
    workspace = Rect(tuple(ws_sec.get("lo", WORKSPACE.lo)), tuple(ws_sec.get("hi", WORKSPACE.hi)))

    arm_sec = _section(doc, "arm")
    base_arm = default_arm(int(arm_sec.get("dof", 7)))
    lim = arm_sec.get("joint_limit")
    arm = ArmModel(
        lengths=np.array(arm_sec.get("lengths", base_arm.lengths)),
        lo=np.full(base_arm.dof, -lim) if lim else base_arm.lo,
        hi=np.full(base_arm.dof, lim) if lim else base_arm.hi,
        base=np.array(arm_sec.get("base", base_arm.base)),
        points_per_link=int(arm_sec.get("points_per_link", base_arm.points_per_link)),
    )

    model_sec = _section(doc, "model")
    obs_sec = _section(doc, "observation")
    arch = arch_for_arm(
        arm, bounds=workspace,
        t_len=int(model_sec.get("t_len", 32)),
        n_rays=int(obs_sec.get("n_rays", 256)),
        hidden=int(model_sec.get("hidden", 512)),
        n_hidden=int(model_sec.get("n_hidden", 3)),
        scan_embed=int(model_sec.get("scan_embed", 64)),
        problem_embed=int(model_sec.get("problem_embed", 32)),
        pose_embed=int(model_sec.get("pose_embed", 32)),
        t_embed=int(model_sec.get("t_embed", 32)),
    )

    tr = _section(doc, "train")
    train = TrainConfig(
        batch_size=int(tr.get("batch_size", 256)),
        lr=float(tr.get("lr", 1e-3)),
        lr_final=None if tr.get("lr_final") is None else float(tr["lr_final"]),
        epochs=int(tr.get("epochs", 300)),
        alpha_loss=float(tr.get("alpha_loss", 4.0)),
        seed=int(tr.get("seed", 0)),
        fk_points_per_link=tr.get("fk_points_per_link"),
        augment_reversal=bool(tr.get("augment_reversal", True)),
        fk_loss_target=str(tr.get("fk_loss_target", "noise")),
        mse_stabilizer=float(tr.get("mse_stabilizer", 1.0)),
    )

    cost = _section(doc, "cost")
    weights = CostWeights(
        w_goal_pos=float(cost.get("w_goal_pos", 100.0)),
        w_goal_rot=float(cost.get("w_goal_rot", 10.0)),
        w_smooth=float(cost.get("w_smooth", 1.0)),
        w_self=float(cost.get("w_self", 50.0)),
        w_world=float(cost.get("w_world", 50.0)),
        d_act=float(cost.get("d_act", 0.05)),
        d_self=float(cost.get("d_self", 0.03)),
    )

    ds = _section(doc, "dataset")
    gen = GenConfig(
        scenes_per_kind=int(ds.get("scenes_per_kind", 667)),
        pairs_per_scene=int(ds.get("pairs_per_scene", 2)),
        t_len=arch.t_len,
        esdf_cell=float(ds.get("esdf_cell", 0.01)),
        n_seeds=int(ds.get("n_seeds", 12)),
        n_iters=int(ds.get("n_iters", 475)),
        delta_t=float(ds.get("delta_t", 0.005)),
        delta_r_deg=float(ds.get("delta_r_deg", 2.86)),
        weights=weights,
    )

    ev = _section(doc, "eval")
    eval_cfg = EvalConfig(
        n_problems=int(ev.get("n_problems", 200)),
        n_trajs=int(ev.get("n_trajs", 12)),
        n_denoising=int(ev.get("n_denoising", 5)),
        n_iters_diffusion=int(ev.get("n_iters_diffusion", 50)),
        n_iters_baseline=int(ev.get("n_iters_baseline", 475)),
        delta_t=float(ev.get("delta_t", 0.005)),
        delta_r_deg=float(ev.get("delta_r_deg", 2.86)),
        niters_sweep=tuple(ev.get("niters_sweep", (50, 475))),
        ntrajs_sweep=tuple(ev.get("ntrajs_sweep", (1, 4, 12))),
        natp_sweep=tuple(ev.get("natp_sweep", (1, 10))),
        graph_natp=int(ev.get("graph_natp", 10)),
    )

    sc = _section(doc, "schedule")
    schedule = ScheduleConfig(
        K=int(sc.get("K", 100)),
        beta_start=float(sc.get("beta_start", 1e-3)),
        beta_end=float(sc.get("beta_end", 8e-2)),
    )

    paths_sec = _section(doc, "paths")
    paths = {}
    for key, default in _DEFAULT_PATHS.items():
        raw = Path(paths_sec.get(key, default))
        paths[key] = raw if raw.is_absolute() else (path.parent / raw).resolve()

    return ExperimentConfig(
        arm=arm, workspace=workspace, arch=arch, train=train, gen=gen,
        eval=eval_cfg, schedule=schedule, weights=weights, paths=paths,
        seed=int(doc.get("seed", 0)),
    )
