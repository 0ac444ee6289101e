"""Command-line entry point: ``mtdgpt <subcommand> [flags]``.

Subcommands communicate only through files under the configured ``out_dir``.
Each prints one JSON summary line on success.  On failure a single JSON line
``{"error": ..., "message": ..., "path": ...}`` goes to stderr and the exit
status is nonzero (2 for a missing input artifact, 1 otherwise).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig
from .dataset import Trajectory, mix_and_persist, read_jsonl, rollout_expert, write_jsonl
from .evaluation import EvalConfig, EvalReport, default_g1, evaluate_expert, evaluate_gpt, make_report
from .expert.ppo import load_expert, train_expert
from .gpt import load_gpt, save_gpt, train_gpt
from .numerics.checkpoint import load_arrays
from .parallel import default_workers
from .seeding import derive_seed
from .sim.geometry import TaskId, build_scenario
from .traces import export_svg_frames, read_trace_jsonl, write_trace_csv, write_trace_jsonl

log = logging.getLogger("mtdgpt")

EXIT_FAILURE = 1
EXIT_MISSING = 2


class MissingArtifact(Exception):
    def __init__(self, path: Path, what: str):
        super().__init__(f"missing {what}: {path}")
        self.path = Path(path)


def require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, what)
    return path


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True), flush=True)


def _task_seed(seed: int, stage: int, task: TaskId) -> int:
    return derive_seed(seed, stage, int(task))


# --------------------------------------------------------------------------- stages
def stage_train_expert(cfg: PipelineConfig, task: TaskId, seed: int, out: Path) -> dict:
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".csv")
    result = train_expert(task, cfg.expert_config(), _task_seed(seed, 1, task), cfg.env_config(), log_path, out)
    return {"stage": "train-expert", "task": task.short, "checkpoint": str(out), "log": str(log_path), "best_success": result.best_success}


def stage_sample(cfg: PipelineConfig, task: TaskId, expert: Path, episodes: int, seed: int, out: Path, workers: int) -> dict:
    policy, meta = load_expert(require(expert, "expert checkpoint"))
    if TaskId(meta["task"]) != task:
        raise ValueError(f"{expert} holds a {TaskId(meta['task']).short!r} expert, not {task.short!r}")
    trajs = rollout_expert(cfg.env_config(), task, policy, episodes, _task_seed(seed, 2, task), cfg.expert["keep_filter"], workers=workers)
    if not trajs:
        raise ValueError(f"no {task.short} episodes survived the {cfg.expert['keep_filter']!r} filter")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, trajs)
    wins = sum(t.success for t in trajs)
    return {"stage": "sample", "task": task.short, "trajectories": len(trajs), "successes": wins, "out": str(out)}


def stage_train_gpt(cfg: PipelineConfig, data: list[Path], seed: int, dataset_out: Path, out_dir: Path) -> dict:
    groups: dict[TaskId, list[Trajectory]] = {t: [] for t in TaskId}
    for p in data:
        for traj in read_jsonl(require(p, "trajectory file")):
            groups[traj.task].append(traj)
    dataset_out.parent.mkdir(parents=True, exist_ok=True)
    mixed = mix_and_persist(groups[TaskId.TURN_LEFT], groups[TaskId.GO_STRAIGHT], groups[TaskId.TURN_RIGHT], dataset_out)
    out_dir.mkdir(parents=True, exist_ok=True)
    gcfg = cfg.gpt_config()
    result = train_gpt(mixed, gcfg, derive_seed(seed, 3), out_dir / "train_log.csv", out_dir / "epochs")
    g1 = {t.short: default_g1(mixed, t, cfg.eval["g1_scale"]) for t in TaskId}
    final = out_dir / "gpt.ckpt"
    save_gpt(final, result.model, {"seed": seed, "g1": g1, "updates": len(result.curve)})
    last = result.curve[-1] if result.curve else {}
    return {
        "stage": "train-gpt",
        "checkpoint": str(final),
        "dataset": str(dataset_out),
        "trajectories": len(mixed),
        "updates": len(result.curve),
        "final_loss": last.get("loss"),
        "g1": g1,
    }


def _model_kind(path: Path) -> str:
    _, meta = load_arrays(path)
    return meta.get("kind", "?")


def stage_eval(
    cfg: PipelineConfig,
    model_path: Path,
    task: TaskId,
    episodes: int,
    seed: int,
    g1: float | None = None,
    traces_out: Path | None = None,
    workers: int = 1,
    label: str | None = None,
    physics: bool = True,
) -> EvalReport:
    """Evaluate a GPT or expert checkpoint; writes dataset-format and physics traces on request."""
    require(model_path, "model file")
    kind = _model_kind(model_path)
    record = traces_out is not None and physics
    if kind == "gpt":
        model, meta = load_gpt(model_path)
        if g1 is None:
            stored = meta.get("g1") or {}
            if task.short not in stored:
                raise ValueError(f"no --g1 given and {model_path} stores no default for {task.short!r}")
            g1 = float(stored[task.short])
        ecfg = EvalConfig(task, episodes, g1, seed, cfg.env_config())
        res = evaluate_gpt(model, ecfg, label or "gpt", record, workers)
    elif kind == "expert":
        policy, meta = load_expert(model_path)
        ecfg = EvalConfig(task, episodes, None, seed, cfg.env_config())
        res = evaluate_expert(policy, ecfg, label or "expert", record, workers)
    else:
        raise ValueError(f"{model_path} is neither a GPT nor an expert checkpoint")
    if traces_out is not None:
        traces_out.mkdir(parents=True, exist_ok=True)
        write_jsonl(traces_out / f"{res.report.model}_{task.short}.jsonl", res.trajectories)
        if record:
            phys_dir = traces_out / "physics"
            phys_dir.mkdir(exist_ok=True)
        for k, trace in enumerate(res.physics if record else []):
            stem = phys_dir / f"{res.report.model}_{task.short}_{k:03d}"
            write_trace_jsonl(trace, stem.with_suffix(".jsonl"))
            write_trace_csv(trace, stem.with_suffix(".csv"))
    return res.report


def stage_replay(cfg: PipelineConfig, trace: Path, svg_out: Path) -> dict:
    records = read_trace_jsonl(require(trace, "trace file"))
    paths = export_svg_frames(records, build_scenario(cfg.env_config().scenario), svg_out)
    return {"stage": "replay", "trace": str(trace), "frames": len(paths), "out": str(svg_out)}


def run_pipeline(cfg: PipelineConfig, seed: int, out_dir: Path, workers: int) -> dict:
    """Experts, sampling, GPT training, paired evaluation and report, all under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.toml").write_text(cfg.dumps(), encoding="utf-8")
    experts, samples = {}, []
    for task in TaskId:
        path = cfg.path("experts", out_dir) / f"expert_{task.short}.ckpt"
        _emit(stage_train_expert(cfg, task, seed, path))
        experts[task] = path
    for task in TaskId:
        path = cfg.path("samples", out_dir) / f"{task.short}.jsonl"
        _emit(stage_sample(cfg, task, experts[task], cfg.expert["episodes"], seed, path, workers))
        samples.append(path)
    gpt_dir = cfg.path("gpt", out_dir)
    _emit(stage_train_gpt(cfg, samples, seed, cfg.path("dataset", out_dir), gpt_dir))
    reports = []
    eval_seed = derive_seed(seed, 4)
    traces = cfg.path("traces", out_dir)
    for task in TaskId:
        for label, model in (("expert", experts[task]), ("gpt", gpt_dir / "gpt.ckpt")):
            rep = stage_eval(cfg, model, task, cfg.eval["episodes"], eval_seed, None, traces, workers, label, physics=False)
            reports.append(rep)
            _emit({"stage": "eval", **rep.row()})
    rep_dir = cfg.path("reports", out_dir)
    rep_dir.mkdir(parents=True, exist_ok=True)
    make_report(reports, rep_dir / "report.csv", rep_dir / "report.txt")
    hashes = {
        str(p.relative_to(out_dir)): file_sha256(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "summary.json"
    }
    summary = {"stage": "pipeline", "seed": seed, "out_dir": str(out_dir), "reports": [r.row() for r in reports], "hashes": hashes}
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return {"stage": "pipeline", "seed": seed, "summary": str(out_dir / "summary.json"), "artifacts": len(hashes)}


# --------------------------------------------------------------------------- argument parsing
def _task(text: str) -> TaskId:
    try:
        return TaskId.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdgpt", description="Multi-task decision transformer for intersection driving.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--workers", type=int, default=default_workers(), help="worker processes for episode-parallel stages (default: all CPUs)")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="stderr log verbosity")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, out_help="artifact root directory (default: [paths] out_dir)"):
        p.add_argument("--config", type=Path, help="TOML config file (default: built-in defaults)")
        p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
        p.add_argument("--out-dir", type=Path, help=out_help)

    p = sub.add_parser("train-expert", help="train a PPO expert for one task")
    common(p)
    p.add_argument("--task", type=_task, required=True, help="left, straight or right")
    p.add_argument("--out", type=Path, help="checkpoint path (default: <out_dir>/<experts>/expert_<task>.ckpt)")

    p = sub.add_parser("sample", help="record expert trajectories as JSON Lines")
    common(p)
    p.add_argument("--task", type=_task, required=True, help="left, straight or right")
    p.add_argument("--episodes", type=int, help="episodes to record (default: [expert] episodes)")
    p.add_argument("--expert", type=Path, help="expert checkpoint (default: <out_dir>/<experts>/expert_<task>.ckpt)")
    p.add_argument("--out", type=Path, help="output JSONL (default: <out_dir>/<samples>/<task>.jsonl)")

    p = sub.add_parser("train-gpt", help="mix per-task trajectories and train the decision transformer")
    common(p)
    p.add_argument("--data", type=Path, nargs="+", help="trajectory JSONL files (default: the three files under <samples>)")
    p.add_argument("--out", type=Path, help="model directory (default: <out_dir>/<gpt>)")

    p = sub.add_parser("eval", help="closed-loop evaluation of a GPT or expert checkpoint")
    common(p)
    p.add_argument("--model", type=Path, required=True, help="GPT or expert checkpoint")
    p.add_argument("--task", type=_task, required=True, help="left, straight or right")
    p.add_argument("--episodes", type=int, help="evaluation episodes (default: [eval] episodes)")
    p.add_argument("--g1", type=float, help="initial return-to-go (default: value stored in the GPT checkpoint)")
    p.add_argument("--traces-out", type=Path, help="directory for trajectory JSONL and per-episode physics traces")
    p.add_argument("--report-out", type=Path, help="report CSV path (an aligned .txt is written alongside)")

    p = sub.add_parser("replay", help="render a physics trace as one SVG per decision step")
    p.add_argument("--config", type=Path, help="TOML config file (geometry must match the recorded run)")
    p.add_argument("--trace", type=Path, required=True, help="physics trace JSONL")
    p.add_argument("--svg-out", type=Path, required=True, help="output directory for SVG frames")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    common(p)
    return parser


def _dispatch(args) -> dict:
    cfg = PipelineConfig.load(args.config)
    if args.command == "replay":
        return stage_replay(cfg, args.trace, args.svg_out)
    out_dir = args.out_dir if args.out_dir is not None else cfg.path("out_dir")
    workers = max(1, args.workers)
    if args.command == "train-expert":
        out = args.out or cfg.path("experts", out_dir) / f"expert_{args.task.short}.ckpt"
        return stage_train_expert(cfg, args.task, args.seed, out)
    if args.command == "sample":
        expert = args.expert or cfg.path("experts", out_dir) / f"expert_{args.task.short}.ckpt"
        out = args.out or cfg.path("samples", out_dir) / f"{args.task.short}.jsonl"
        episodes = args.episodes if args.episodes is not None else cfg.expert["episodes"]
        if episodes < 1:
            raise ValueError("--episodes must be at least 1")
        return stage_sample(cfg, args.task, expert, episodes, args.seed, out, workers)
    if args.command == "train-gpt":
        data = args.data or [cfg.path("samples", out_dir) / f"{t.short}.jsonl" for t in TaskId]
        out = args.out or cfg.path("gpt", out_dir)
        return stage_train_gpt(cfg, data, args.seed, cfg.path("dataset", out_dir), out)
    if args.command == "eval":
        episodes = args.episodes if args.episodes is not None else cfg.eval["episodes"]
        report = stage_eval(cfg, args.model, args.task, episodes, args.seed, args.g1, args.traces_out, workers)
        if args.report_out is not None:
            args.report_out.parent.mkdir(parents=True, exist_ok=True)
            make_report([report], args.report_out, args.report_out.with_suffix(".txt"))
        return {"stage": "eval", **report.row()}
    if args.command == "pipeline":
        return run_pipeline(cfg, args.seed, out_dir, workers)
    raise ValueError(f"unknown command {args.command!r}")


def _error_line(kind: str, message: str, path=None) -> None:
    rec = {"error": kind, "message": message}
    if path is not None:
        rec["path"] = str(path)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _emit(_dispatch(args))
    except MissingArtifact as exc:
        _error_line("missing_artifact", str(exc), exc.path)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        _error_line("missing_artifact", str(exc), exc.filename)
        return EXIT_MISSING
    except ConfigError as exc:
        _error_line("config", str(exc))
        return EXIT_FAILURE
    except (ValueError, RuntimeError, OSError) as exc:
        _error_line(type(exc).__name__, str(exc))
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
