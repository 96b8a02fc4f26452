"""Command-line entry point: `python -m src.main <command> [flags]`.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure. Every
failure prints one `error: <reason>: <message>` line to stderr.
"""
import argparse
import glob
import json
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from datetime import datetime
from typing import Any, Dict, List, Optional

from src.ablation import directional_checks, format_checks, format_markdown, rows_to_json, run_ablation
from src.bank_store import get_bank_store
from src.cloud_io import (frame_stem, list_sequences, read_cloud, read_sequence, write_boxes, write_cloud, write_ply,
                          write_sequence)
from src.cust_logger import logger, set_files_message_color
from src.data_classes import AblationFlags, AppConfig, config_to_dict, load_config
from src.dense_object_gen import build_dense_bank, compose_dense_scene
from src.errors import EmptyInputError, FormatError, GradCheckError, S2DError, UsageError
from src.evaluate import dump_pcr_points, evaluate, format_report
from src.gradcheck import CASES, run_gradcheck
from src.recon_targets import build_targets, target_summary, write_targets
from src.report import load_metrics, plot_losses, summarize
from src.synth_lidar import generate_sequence
from src.train import build_benchmark, load_detector, train_ddet, train_sdet

set_files_message_color("PURPLE")


class ArgParser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; usage errors here are exit 1
    def error(self, message):
        raise UsageError(message)


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, Any]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got '{pair}'")
        overrides[key.strip()] = _parse_value(value.strip())
    return overrides


def default_workers() -> int:
    raw = os.getenv("S2D_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"S2D_WORKERS must be an integer, got '{raw}'")


def build_parser() -> ArgParser:
    common = ArgParser(add_help=False)
    common.add_argument("--config", help="TOML config file (scene, voxel, densify, arch, loss, train, eval tables)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("--workers", type=int, default=None, help="worker count (default $S2D_WORKERS or 1)")

    parser = ArgParser(prog="s2d", description="Dense-feature distillation toolkit for LiDAR detection")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    p = sub.add_parser("gen", parents=[common], help="generate synthetic sequences")
    p.add_argument("--seed", type=int, help="scene seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sequences", type=int, help="number of sequences")

    p = sub.add_parser("densify", parents=[common], help="build dense object banks")
    p.add_argument("--seq", "--data", dest="seq", required=True, help="sequence directory (or directory of sequences)")
    p.add_argument("--out", required=True, help="bank root directory")

    p = sub.add_parser("compose", parents=[common], help="compose dense scenes from a bank")
    p.add_argument("--seq", "--data", dest="seq", required=True, help="sequence directory (or directory of sequences)")
    p.add_argument("--bank", required=True, help="bank root written by densify")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ply", action="store_true", help="also write ascii PLY dumps of the dense scenes")

    p = sub.add_parser("targets", parents=[common], help="build occupancy targets from composed object clouds")
    p.add_argument("--data", required=True, help="directory written by compose")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ply", action="store_true", help="also write the 1/2-scale target points as PLY")

    p = sub.add_parser("train", parents=[common], help="train the dense teacher or the sparse student")
    p.add_argument("--stage", choices=("ddet", "sdet"), help="training stage")
    p.add_argument("--data", help="sequence root (default: generate from the config)")
    p.add_argument("--ablation", help="student flags, e.g. +distill,+s2d,+pcr or none")
    p.add_argument("--ddet-ckpt", help="teacher checkpoint (required for sdet)")
    p.add_argument("--out", required=True, help="checkpoint path stem")
    p.add_argument("--metrics", help="metrics JSONL path (default <out>.metrics.jsonl)")
    p.add_argument("--steps", type=int, help="maximum optimizer steps")
    p.add_argument("--seed", type=int, help="training seed")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out sequences")
    p.add_argument("--ckpt", required=True, help="checkpoint path stem")
    p.add_argument("--data", help="sequence root (default: generate from the config)")
    p.add_argument("--teacher", help="teacher checkpoint for the feature MSE")
    p.add_argument("--split", choices=("heldout", "train", "all"), default="heldout", help="which sequences to score")
    p.add_argument("--json-out", help="also write the report JSON here")
    p.add_argument("--dump-ply", metavar="DIR", help="also write the reconstructed PCR points per frame as PLY")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--module", required=True, help="conv2d, conv3d, ..., s2d, pcr, losses, or 'all'")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    p.add_argument("--max-coords", type=int, default=64, help="sampled coordinates per tensor")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")

    p = sub.add_parser("ablation", parents=[common], help="run the ablation matrix")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="sequence root (default: generate from the config)")
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")

    p = sub.add_parser("report", parents=[common], help="plot a training metrics file")
    p.add_argument("--metrics", required=True, help="metrics JSONL path")
    p.add_argument("--out", required=True, help="output PNG path")
    return parser


def _config(args, extra: Optional[Dict[str, Any]] = None) -> AppConfig:
    overrides = parse_overrides(args.set)
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return load_config(args.config, overrides)


def _print_json(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _benchmark(args, cfg: AppConfig, workers: int):
    sequences = None
    if getattr(args, "data", None):
        sequences = [read_sequence(d) for d in list_sequences(args.data)]
    return build_benchmark(cfg, sequences, workers)


### Commands ###

def cmd_gen(args, workers: int) -> int:
    cfg = _config(args, {"scene.seed": args.seed, "scene.n_sequences": args.sequences})
    for i in range(cfg.scene.n_sequences):
        seq = generate_sequence(cfg.scene, i)
        write_sequence(os.path.join(args.out, f"seq_{i:02d}"), seq, {"sequence": i, "scene": config_to_dict(cfg.scene)})
    _print_json({"out": args.out, "sequences": cfg.scene.n_sequences, "frames": cfg.scene.n_frames})
    return 0


def cmd_densify(args, workers: int) -> int:
    cfg = _config(args)
    summary = {}
    for seq_dir in list_sequences(args.seq):
        name = os.path.basename(os.path.normpath(seq_dir))
        bank = build_dense_bank(read_sequence(seq_dir), cfg.densify, workers)
        store = get_bank_store(os.path.join(args.out, name))
        store.put_many([bank[t] for t in sorted(bank)])
        summary[name] = store.index()
    _print_json(summary)
    return 0


def cmd_compose(args, workers: int) -> int:
    _config(args)
    counts = {}
    for seq_dir in list_sequences(args.seq):
        name = os.path.basename(os.path.normpath(seq_dir))
        bank = get_bank_store(os.path.join(args.bank, name)).as_mapping()
        out_dir = os.path.join(args.out, name)
        os.makedirs(out_dir, exist_ok=True)
        seq = read_sequence(seq_dir)
        for i, frame in enumerate(seq.frames):
            scene = compose_dense_scene(frame, bank, i)
            stem = frame_stem(out_dir, i)
            write_cloud(stem + "_dense.s2dc", scene.dense_cloud)
            write_cloud(stem + "_object.s2dc", scene.object_only_cloud)
            write_boxes(stem + ".json", scene.boxes, {"frame": i, "source": seq_dir})
            if args.ply:
                write_ply(stem + "_dense.ply", scene.dense_cloud)
        counts[name] = len(seq.frames)
    _print_json({"out": args.out, "frames": counts})
    return 0


def cmd_targets(args, workers: int) -> int:
    cfg = _config(args)
    paths = sorted(glob.glob(os.path.join(args.data, "**", "*_object.s2dc"), recursive=True))
    if not paths:
        raise EmptyInputError(f"no composed object clouds (*_object.s2dc) under {args.data}")
    summary = {}
    for path in paths:
        rel = os.path.relpath(path, args.data)[: -len("_object.s2dc")]
        target = build_targets(read_cloud(path), cfg.voxel)
        stem = os.path.join(args.out, rel)
        write_targets(stem, target)
        if args.ply:
            half = target.by_factor(2)
            write_ply(stem + "_s2.ply", half.gt_points[:, half.mask > 0].T)
        summary[rel] = target_summary(target)
    _print_json(summary)
    return 0


def cmd_train(args, workers: int) -> int:
    ablation = AblationFlags.parse(args.ablation).model_dump() if args.ablation is not None else None
    cfg = _config(args, {"train.stage": args.stage, "train.ablation": ablation,
                         "train.max_steps": args.steps, "train.seed": args.seed})
    metrics = args.metrics or f"{args.out}.metrics.jsonl"
    if cfg.train.stage == "sdet" and not args.ddet_ckpt:
        raise UsageError("--ddet-ckpt is required for --stage sdet")
    bench = _benchmark(args, cfg, workers)
    if cfg.train.stage == "ddet":
        result = train_ddet(bench.train, cfg, args.out, metrics, workers)
    else:
        result = train_sdet(bench.train, args.ddet_ckpt, cfg, args.out, metrics, workers)
    _print_json({"checkpoint": result.checkpoint, "steps": len(result.history), "metrics": metrics,
                 "final_total": result.totals[-1] if result.history else None})
    return 0


def cmd_eval(args, workers: int) -> int:
    cfg = _config(args)
    bench = _benchmark(args, cfg, workers)
    samples = {"heldout": bench.heldout, "train": bench.train, "all": bench.train + bench.heldout}[args.split]
    report = evaluate(args.ckpt, samples, cfg, args.teacher)
    payload = report.model_dump(mode="json")
    if args.dump_ply:
        model, meta = load_detector(args.ckpt)
        payload["pcr_ply"] = dump_pcr_points(model, samples, cfg, args.dump_ply, meta.get("stage", "sdet"))
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    _print_json(payload)
    print(format_report(report))
    return 0


def cmd_gradcheck(args, workers: int) -> int:
    names = sorted(CASES) if args.module == "all" else [args.module]
    failed = []
    for name in names:
        err = run_gradcheck(name, args.seed, args.max_coords)
        print(f"{name}: max relative error {err:.3e}")
        if not err < args.tol:
            failed.append(f"{name} ({err:.3e})")
    if failed:
        raise GradCheckError(f"above {args.tol:.1e}: {', '.join(failed)}")
    return 0


def cmd_ablation(args, workers: int) -> int:
    cfg = _config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got '{args.seeds}'")
    bench = _benchmark(args, cfg, workers)
    rows = run_ablation(cfg, args.out, seeds, workers, bench)
    table = format_markdown(rows)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.md"), "w") as f:
        f.write(table + "\n")
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump(rows_to_json(rows), f, indent=2, sort_keys=True)
    checks = directional_checks(rows)
    with open(os.path.join(args.out, "ablation_checks.json"), "w") as f:
        json.dump([vars(c) for c in checks], f, indent=2, sort_keys=True)
    print(table)
    print(format_checks(checks))
    return 0


def cmd_report(args, workers: int) -> int:
    records = load_metrics(args.metrics)
    plot_losses(records, args.out)
    print(summarize(records))
    return 0


HANDLERS = {
    "gen": cmd_gen, "densify": cmd_densify, "compose": cmd_compose, "targets": cmd_targets, "train": cmd_train,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablation": cmd_ablation, "report": cmd_report,
}


def _fail(e: S2DError) -> int:
    logger.error({"timestamp": datetime.now().isoformat(), "msg": type(e).__name__, "data": e.message})
    print(e.one_line(), file=sys.stderr)
    return e.exit_code


def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        workers = args.workers if args.workers is not None else default_workers()
        if workers < 1:
            raise UsageError(f"--workers must be at least 1, got {workers}")
        logger.info({"timestamp": datetime.now().isoformat(), "msg": f"running {args.command}", "data": vars(args)})
        return HANDLERS[args.command](args, workers)
    except OSError as e:
        return _fail(FormatError(str(e)))
    except S2DError as e:
        return _fail(e)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else 0


if __name__ == "__main__":
    sys.exit(run())
