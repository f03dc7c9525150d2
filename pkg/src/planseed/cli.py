"""Command-line front end: dataset generation, training, planning, evaluation, reports."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .bench import aggregate, default_methods, evaluate, read_eval_csv, run_method, \
    write_report_charts, write_report_csv
from .config import ExperimentConfig, load_config
from .data import generate_records, generate_scene, read_dataset, validate_dataset, write_dataset
from .diffusion import NoiseSchedule, create_net, load_checkpoint, make_schedule, save_checkpoint, train
from .geometry import world_to_json


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planseed",
                                description="diffusion-seeded motion optimization benchmark")
    p.add_argument("--config", required=True, help="experiment config YAML")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=argparse.ArgumentParser)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    g = add_parser("gen-scenes", help="write world JSON files for inspection")
    g.add_argument("--out", default=None, help="output directory")
    g.add_argument("--count", type=int, default=None, help="scenes per kind")

    d = add_parser("gen-data", help="generate the expert dataset")
    d.add_argument("--out", default=None, help="dataset file path")
    d.add_argument("--scenes-per-kind", type=int, default=None)
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--progress", type=int, default=50, help="print every N scenes")

    t = add_parser("train", help="train the diffusion seeder")
    t.add_argument("--data", default=None, help="dataset file")
    t.add_argument("--out", default=None, help="checkpoint path")
    t.add_argument("--loss-csv", default=None)
    t.add_argument("--epochs", type=int, default=None)

    pl = add_parser("plan", help="solve one problem, print PlanResult JSON")
    pl.add_argument("--data", default=None, help="problem set (dataset file)")
    pl.add_argument("--ckpt", default=None)
    pl.add_argument("--index", type=int, default=0)
    pl.add_argument("--method", default="diffusion-niters50")

    e = add_parser("eval", help="run the method grid over a held-out problem set")
    e.add_argument("--data", default=None, help="eval problem set")
    e.add_argument("--ckpt", default=None)
    e.add_argument("--out", default=None, help="raw per-problem CSV")
    e.add_argument("--methods", default=None,
                   help="comma-separated method-name filter (substring match)")
    e.add_argument("--n-problems", type=int, default=None)
    e.add_argument("--progress", type=int, default=20)

    r = add_parser("report", help="aggregate a raw eval CSV into report CSV + SVG charts")
    r.add_argument("--in", dest="inp", default=None, help="raw eval CSV")
    r.add_argument("--out-dir", default=None)
    return p


def cmd_gen_scenes(cfg: ExperimentConfig, args, seed: int) -> int:
    out = Path(args.out) if args.out else cfg.path("scenes_dir")
    out.mkdir(parents=True, exist_ok=True)
    count = args.count if args.count is not None else cfg.gen.scenes_per_kind
    idx = 0
    for kind in cfg.gen.kinds:
        for _ in range(count):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, idx)))
            world = generate_scene(kind, rng, bounds=cfg.workspace, base=cfg.arm.base)
            (out / f"{kind}-{idx:05d}.json").write_text(world_to_json(world))
            idx += 1
    print(f"wrote {idx} worlds to {out}")
    return 0


def cmd_gen_data(cfg: ExperimentConfig, args, seed: int) -> int:
    out = Path(args.out) if args.out else cfg.path("dataset")
    out.parent.mkdir(parents=True, exist_ok=True)
    gen = cfg.gen
    if args.scenes_per_kind is not None:
        from dataclasses import replace
        gen = replace(gen, scenes_per_kind=args.scenes_per_kind)
    records = generate_records(gen, cfg.arm, master_seed=seed, n_workers=args.workers,
                               progress_every=args.progress)
    write_dataset(records, out, cfg.arm, master_seed=seed)
    report = validate_dataset(records, cfg.arm, cfg.gen.delta_t, cfg.gen.delta_r_deg)
    print(f"wrote {report['count']} records to {out} "
          f"(graph_used: {report['graph_used']}, re-verify failures: {report['failed']})")
    if report["failed"]:
        raise RuntimeError(f"{report['failed']} records failed ground-truth re-verification")
    return 0


def cmd_train(cfg: ExperimentConfig, args, seed: int) -> int:
    data_path = Path(args.data) if args.data else cfg.path("dataset")
    ckpt_path = Path(args.out) if args.out else cfg.path("checkpoint")
    loss_path = Path(args.loss_csv) if args.loss_csv else cfg.path("loss_csv")
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    loss_path.parent.mkdir(parents=True, exist_ok=True)
    records, header = read_dataset(data_path)
    print(f"training on {len(records)} records from {data_path}")
    tcfg = cfg.train
    if args.epochs is not None:
        from dataclasses import replace
        tcfg = replace(tcfg, epochs=args.epochs)
    if tcfg.seed == 0 and seed != 0:
        from dataclasses import replace
        tcfg = replace(tcfg, seed=seed)
    schedule = make_schedule(cfg.schedule.K, cfg.schedule.beta_start, cfg.schedule.beta_end)
    net = create_net(cfg.arch, seed=tcfg.seed)
    import time
    t0 = time.perf_counter()
    curve = train(net, records, schedule, cfg.arm, tcfg,
                  callback=lambda ep, loss: print(f"epoch {ep + 1}/{tcfg.epochs}: "
                                                  f"mean loss {loss:.6f}", flush=True))
    wall = time.perf_counter() - t0
    meta = {"train_seed": tcfg.seed, "epochs": tcfg.epochs, "n_records": len(records),
            "dataset_master_seed": header.get("master_seed"), "final_loss": curve[-1],
            "train_wall_s": wall}
    save_checkpoint(ckpt_path, net, schedule, meta)
    with open(loss_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve):
            w.writerow([i + 1, repr(v)])
    print(f"saved checkpoint to {ckpt_path} ({wall:.0f}s); loss curve to {loss_path}")
    return 0


def _load_net(cfg: ExperimentConfig, ckpt_arg):
    path = Path(ckpt_arg) if ckpt_arg else cfg.path("checkpoint")
    net, schedule, meta = load_checkpoint(path)
    return net, schedule, meta


def _select_methods(cfg: ExperimentConfig, filter_arg):
    methods = default_methods(cfg)
    if filter_arg:
        keys = [k.strip() for k in filter_arg.split(",") if k.strip()]
        methods = [m for m in methods if any(k in m.name for k in keys)]
        if not methods:
            raise ValueError(f"method filter {filter_arg!r} matches nothing")
    return methods


def cmd_plan(cfg: ExperimentConfig, args, seed: int) -> int:
    data_path = Path(args.data) if args.data else cfg.path("eval_set")
    records, _ = read_dataset(data_path)
    if not (0 <= args.index < len(records)):
        raise ValueError(f"problem index {args.index} out of range (0..{len(records) - 1})")
    methods = [m for m in default_methods(cfg) if m.name == args.method]
    if not methods:
        names = ", ".join(m.name for m in default_methods(cfg))
        raise ValueError(f"unknown method {args.method!r}; available: {names}")
    spec = methods[0]
    net = schedule = None
    if spec.kind == "diffusion":
        net, schedule, _ = _load_net(cfg, args.ckpt)
    res = run_method(cfg.arm, net, schedule, spec, records[args.index], cfg, seed)
    print(res.to_json())
    return 0


def cmd_eval(cfg: ExperimentConfig, args, seed: int) -> int:
    data_path = Path(args.data) if args.data else cfg.path("eval_set")
    out_path = Path(args.out) if args.out else cfg.path("eval_csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    records, _ = read_dataset(data_path)
    n = args.n_problems if args.n_problems is not None else cfg.eval.n_problems
    records = records[:n]
    if len(records) == 0:
        raise ValueError("eval set is empty; refusing to write an empty report")
    methods = _select_methods(cfg, args.methods)
    net = schedule = None
    if any(m.kind == "diffusion" for m in methods):
        net, schedule, _ = _load_net(cfg, args.ckpt)
    rows = evaluate(cfg, records, methods, net, schedule, seed, out_path,
                    progress_every=args.progress)
    print(f"wrote {len(rows)} rows ({len(methods)} methods x {len(records)} problems) "
          f"to {out_path}")
    return 0


def cmd_report(cfg: ExperimentConfig, args, seed: int) -> int:
    inp = Path(args.inp) if args.inp else cfg.path("eval_csv")
    out_dir = Path(args.out_dir) if args.out_dir else cfg.path("report_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_eval_csv(inp)
    report = aggregate(rows)
    write_report_csv(report, out_dir / "report.csv")
    write_report_charts(report, out_dir)
    for r in report:
        rate = f"{r['success_rate'] * 100:5.1f}%"
        print(f"{r['method']:24s} success {rate}  plan mean {r['plan_time_mean_all']:.3f}s "
              f"p75 {r['plan_time_p75_all']:.3f}s p98 {r['plan_time_p98_all']:.3f}s")
    print(f"report written to {out_dir}")
    return 0


_COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "plan": cmd_plan,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.seed
        return _COMMANDS[args.command](cfg, args, seed)
    except Exception as e:  # structured nonzero exit naming the failing stage
        print(f"error in {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
