"""Command-line entry point.

Exit codes: 0 success, 1 domain error (bad paths, diverged training,
format violations), 2 usage error.  Every command takes --seed, --config
(INI-style file, see ``config``), --set key=value overrides, and --out
for report/artifact output.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (
    ContractError, DataGenerationError, DimensionError, FormatError,
    TrainingDivergedError,
)

_DOMAIN_ERRORS = (FileNotFoundError, NotADirectoryError, FormatError,
                  DimensionError, ContractError, DataGenerationError,
                  TrainingDivergedError, ValueError, KeyError, OSError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clickseg",
        description="Interactive click-to-segment toolkit: data generation, "
                    "training, robot-user evaluation, benchmarks, service.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0,
                       help="master seed for all stochastic steps")
        p.add_argument("--config", type=Path, default=None,
                       help="INI-style config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", type=Path, default=Path("out"),
                       help="output directory for reports and artifacts")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS threads")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded numerics")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-eval", type=int, default=50)

    p = sub.add_parser("train", help="stage-wise training on synthetic scenes")
    common(p)
    p.add_argument("--ablation", choices=["baseline", "fpm", "iaf", "full"],
                   default="full")
    p.add_argument("--n-scenes", type=int, default=200,
                   help="scenes generated for training (ignored with --data)")
    p.add_argument("--data", type=Path, default=None,
                   help="manifest.json of a pre-generated dataset")

    p = sub.add_parser("eval", help="robot-user evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n-scenes", type=int, default=50)
    p.add_argument("--data", type=Path, default=None)

    p = sub.add_parser("ablate", help="train/evaluate an ablation grid")
    common(p)
    p.add_argument("--grid", choices=["components", "fpm", "strategy"],
                   default="components")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-eval", type=int, default=50)
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("bench-graph", help="sparse vs dense scaling benchmark")
    common(p)

    p = sub.add_parser("bench-spc", help="seconds-per-click timing")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--n-scenes", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--ops", default="all", help="'all' or comma-separated op names")
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("serve", help="run the HTTP session service")
    common(p)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--session-ttl", type=float, default=None)
    p.add_argument("--host", default="127.0.0.1")

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    limiter = None   # held so the thread cap lasts for the whole command
    if args.deterministic or args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=1 if args.deterministic else args.threads)
    try:
        from .config import Config
        cfg = Config.load(args.config, args.overrides)
        handler = _HANDLERS[args.command]
        return handler(args, cfg)
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


def _ensure_out(args) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _load_scenes(data_path, n, seed, scene_cfg, offset=0):
    from .data import generate_split, load_manifest, load_scene
    if data_path is not None:
        manifest = load_manifest(data_path)
        split = "eval" if offset else "train"
        entries = manifest.paths(split) or manifest.entries
        return [load_scene(data_path, e) for e in entries]
    return generate_split(n, seed, scene_cfg, index_offset=offset)


def _cmd_gen_data(args, cfg) -> int:
    from .data import build_dataset
    out = _ensure_out(args)
    manifest = build_dataset(args.n_train, args.n_eval, args.seed, out,
                             cfg.scene())
    print(f"wrote {len(manifest.entries)} image/mask pairs under {out}")
    return 0


def _cmd_train(args, cfg) -> int:
    from .model import save_bundle
    from .training import train_coarse, train_fine, write_history_jsonl
    out = _ensure_out(args)
    train_cfg = cfg.train(seed=args.seed, ablation=args.ablation)
    scenes = _load_scenes(args.data, args.n_scenes, args.seed, cfg.scene())
    try:
        coarse, history = train_coarse(scenes, train_cfg, cfg.cascade())
        fine = None
        if train_cfg.resolved()[1]:
            fine, fine_history = train_fine(coarse, scenes, train_cfg, cfg.cascade())
            history = history + [{**h, "stage": "fine"} for h in fine_history]
    except TrainingDivergedError as exc:
        dump = out / "divergence.json"
        dump.write_text(json.dumps(exc.diagnostics, indent=2, default=str))
        print(f"error: {exc} (diagnostics in {dump})", file=sys.stderr)
        return 1
    ckpt = out / "model.ckpt"
    save_bundle(ckpt, coarse, fine)
    write_history_jsonl(history, out / "train_log.jsonl")
    print(f"checkpoint: {ckpt}  steps: {len(history)}  "
          f"final loss: {history[-1]['loss']:.4f}")
    return 0


def _cmd_eval(args, cfg) -> int:
    from .evalbench import (
        evaluate, noc, nof, write_curve_tsv, write_records_csv,
        write_summary_json,
    )
    from .model import load_bundle
    out = _ensure_out(args)
    coarse, fine = load_bundle(args.checkpoint)
    scenes = _load_scenes(args.data, args.n_scenes, args.seed, cfg.scene(),
                          offset=10_000)
    eval_cfg = cfg.eval()
    records = evaluate(coarse, fine, scenes, eval_cfg, cfg.cascade())
    write_records_csv(records, out / "records.csv")
    write_summary_json(records, eval_cfg, out / "summary.json")
    write_curve_tsv(records, eval_cfg.max_clicks, out / "miou_curve.tsv")
    print(f"NoC@{int(eval_cfg.tau * 100)} = {noc(records, eval_cfg):.3f}   "
          f"NoF = {nof(records, eval_cfg)}   ({len(records)} scenes)")
    return 0


def _cmd_ablate(args, cfg) -> int:
    from .training import run_ablation
    out = _ensure_out(args)
    report = run_ablation(args.grid, args.n_train, args.n_eval,
                          cfg.train(seed=args.seed),
                          seeds=[args.seed + i for i in range(args.n_seeds)],
                          eval_cfg=cfg.eval(), cascade_cfg=cfg.cascade(),
                          scene_cfg=cfg.scene(), n_jobs=args.jobs)
    path = out / f"ablation_{args.grid}.csv"
    report.to_csv(path)
    for variant in dict.fromkeys(c.variant for c in report.cells):
        print(f"{variant:18s} mean NoC = {report.mean_noc(variant):.3f}")
    print(f"table: {path}")
    return 0


def _cmd_bench_graph(args, cfg) -> int:
    from .graph import benchmark_scaling
    out = _ensure_out(args)
    report = benchmark_scaling(c=cfg["bench.c"], m=cfg["bench.m"],
                               sizes=cfg.bench_sizes(), runs=cfg["bench.runs"],
                               dense_limit=cfg["bench.dense_limit"],
                               seed=args.seed)
    report.to_csv(out / "bench_graph.csv")
    report.to_json(out / "bench_graph.json")
    print(f"sparse log-log slope {report.sparse_slope:.2f}   "
          f"dense slope {report.dense_slope:.2f}")
    print(f"sparse doubling ratio {report.doubling_ratio('sparse'):.2f}   "
          f"dense doubling ratio {report.doubling_ratio('dense'):.2f}")
    return 0


def _cmd_bench_spc(args, cfg) -> int:
    from .data import generate_split
    from .evalbench import spc_benchmark
    from .model import ArchConfig, init_params, load_bundle
    out = _ensure_out(args)
    if args.checkpoint is not None:
        coarse, fine = load_bundle(args.checkpoint)
    else:
        coarse = init_params(ArchConfig(), seed=args.seed)
        fine = init_params(ArchConfig(), seed=args.seed + 1)
    scenes = generate_split(args.n_scenes, args.seed, cfg.scene())
    stats = spc_benchmark(coarse, fine, scenes, cfg.eval(), cfg.cascade())
    payload = {"median_s": stats.median_s, "mean_s": stats.mean_s,
               "steps": stats.steps, "machine": stats.machine,
               "reference_gpu_spc_s": stats.reference_gpu_spc_s}
    (out / "spc.json").write_text(json.dumps(payload, indent=2))
    print(f"SPC median {stats.median_s * 1e3:.1f} ms over {stats.steps} steps")
    return 0


def _cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import run_suite
    ops = None if args.ops == "all" else args.ops.split(",")
    results = run_suite(seed=args.seed, instances=args.instances, ops=ops)
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:20s} max_rel_err={r.max_err:.3e}  ({r.instances} instances)  {status}")
        failed += 0 if r.ok else 1
    return 1 if failed else 0


def _cmd_serve(args, cfg) -> int:
    import uvicorn
    from .service import create_app, default_frontend_dir
    app = create_app(
        checkpoint=args.checkpoint,
        session_ttl=args.session_ttl if args.session_ttl is not None
        else cfg["serve.session_ttl"],
        frontend_dir=default_frontend_dir(),
        seed=args.seed,
        cascade_cfg=cfg.cascade())
    port = args.port if args.port is not None else cfg["serve.port"]
    uvicorn.run(app, host=args.host, port=port)
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "bench-graph": _cmd_bench_graph,
    "bench-spc": _cmd_bench_spc,
    "gradcheck": _cmd_gradcheck,
    "serve": _cmd_serve,
}
