"""Closed-loop evaluation of GPT and expert policies, plus comparison reports.

Report CSV columns (in order): model, task, episodes, success_rate,
collision_rate, timeout_rate, mean_return, mean_length, ci95, g1.  Rates are
written with ``repr`` so they re-parse to the identical float; missing
optional values are written as ``-``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    N_ACTIONS,
    PREV_ACTION_DIM,
    MixedDataset,
    TokenCache,
    Trajectory,
    prev_action_code,
    run_policy_episode,
    tokenize,
)
from .gpt import GPTModel, masked_action_error, predict_action
from .kinematics import MetaAction
from .numerics import tensor as T
from .parallel import parallel_map
from .seeding import derive_seed
from .sim.env import REWARD_QUANTUM, Cause, EnvConfig, IntersectionEnv
from .sim.geometry import TaskId

EVAL_STREAM = 11
REPORT_COLUMNS = [
    "model",
    "task",
    "episodes",
    "success_rate",
    "collision_rate",
    "timeout_rate",
    "mean_return",
    "mean_length",
    "ci95",
    "g1",
]


@dataclass(frozen=True)
class EvalConfig:
    task: TaskId
    episodes: int = 100
    g1: float | None = None
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        object.__setattr__(self, "task", TaskId(self.task))
        if self.episodes < 1:
            raise ValueError(f"episodes must be at least 1, got {self.episodes}")


def eval_seeds(seed: int, task: TaskId, n: int) -> list[int]:
    """Environment seeds shared by every model evaluated on ``task`` (paired comparison)."""
    return [derive_seed(seed, EVAL_STREAM, int(task), k) for k in range(n)]


@dataclass
class EvalReport:
    model: str
    task: TaskId
    episodes: int
    successes: int
    collisions: int
    timeouts: int
    mean_return: float
    mean_length: float
    g1: float | None = None

    def __post_init__(self):
        if self.successes + self.collisions + self.timeouts != self.episodes:
            raise ValueError("outcome counts must partition the episodes")

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes

    @property
    def collision_rate(self) -> float:
        return self.collisions / self.episodes

    @property
    def timeout_rate(self) -> float:
        # defined as the remainder so that success + collision + timeout == 1.0
        # holds exactly when summed in that order
        return 1.0 - (self.success_rate + self.collision_rate)

    @property
    def ci95(self) -> float:
        """Normal-approximation 95% half-width of the success rate."""
        p = self.success_rate
        return 1.96 * math.sqrt(p * (1 - p) / self.episodes)

    @classmethod
    def from_trajectories(cls, model: str, task: TaskId, trajs: list[Trajectory], g1: float | None = None) -> "EvalReport":
        if not trajs:
            raise ValueError("no episodes to report")
        causes = [t.outcome for t in trajs]
        return cls(
            model=model,
            task=TaskId(task),
            episodes=len(trajs),
            successes=causes.count(Cause.ARRIVED),
            collisions=causes.count(Cause.COLLIDED),
            timeouts=causes.count(Cause.TIMED_OUT),
            mean_return=float(np.mean([t.total_return for t in trajs])),
            mean_length=float(np.mean([len(t) for t in trajs])),
            g1=g1,
        )

    def row(self) -> dict:
        return {
            "model": self.model,
            "task": self.task.short,
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "collision_rate": self.collision_rate,
            "timeout_rate": self.timeout_rate,
            "mean_return": self.mean_return,
            "mean_length": self.mean_length,
            "ci95": self.ci95,
            "g1": self.g1,
        }


# --------------------------------------------------------------------------- episodes
def quantize_rtg(g: float) -> float:
    return round(g / REWARD_QUANTUM) * REWARD_QUANTUM


def first_token(state: np.ndarray, g1: float) -> np.ndarray:
    return np.concatenate([state, prev_action_code(None), [g1]])


def run_gpt_episode(model: GPTModel, env_config: EnvConfig, task: TaskId, seed: int, g1: float, record_trace: bool = False):
    """One RTG-conditioned episode; returns ``(trajectory, physics_trace)``."""
    env = IntersectionEnv(env_config, task)
    obs = env.reset(seed, record_trace=record_trace)
    K = model.config.context
    g = quantize_rtg(g1)
    tokens = [first_token(obs.flat(), g)]
    states, actions, rewards, rtgs = [], [], [], []
    while True:
        a, _ = predict_action(model, np.array(tokens[-K:]))
        states.append(obs.flat())
        actions.append(a)
        rtgs.append(g)
        out = env.step(MetaAction(a))
        rewards.append(out.reward)
        if out.terminated:
            traj = Trajectory(task, np.array(states), np.array(actions), np.array(rewards), out.cause, seed, np.array(rtgs))
            return traj, env.trace
        g = g - out.reward
        obs = out.obs
        prev = np.zeros(PREV_ACTION_DIM)
        prev[a] = 1.0
        tokens.append(np.concatenate([obs.flat(), prev, [g]]))


def replay_actions(model: GPTModel, traj: Trajectory) -> np.ndarray:
    """Re-predict every action of a recorded GPT episode from its own tokens."""
    if traj.rtg is None:
        raise ValueError("trajectory carries no conditioning RTG")
    K = model.config.context
    tokens = np.array([t.vector() for t in tokenize(traj, traj.rtg)])
    return np.array([predict_action(model, tokens[max(0, t + 1 - K) : t + 1])[0] for t in range(len(traj))])


def _gpt_job(args):
    model, env_config, task, seed, g1, record = args
    return run_gpt_episode(model, env_config, task, seed, g1, record)


def _expert_job(args):
    env_config, task, policy, seed, record = args
    return run_policy_episode(env_config, task, policy, seed, greedy=True, record_trace=record)


@dataclass
class EvalResult:
    report: EvalReport
    trajectories: list[Trajectory]
    physics: list[list[dict] | None]


def evaluate_gpt(model: GPTModel, cfg: EvalConfig, label: str = "gpt", record_physics: bool = False, workers: int = 1) -> EvalResult:
    if cfg.g1 is None:
        raise ValueError("evaluate_gpt needs a target return g1")
    expected = cfg.env.obs_dim + PREV_ACTION_DIM + 1
    if model.token_dim != expected:
        raise ValueError(f"model token width {model.token_dim} does not match environment token width {expected}")
    model.eval()
    g1 = quantize_rtg(cfg.g1)
    jobs = [(model, cfg.env, cfg.task, s, g1, record_physics) for s in eval_seeds(cfg.seed, cfg.task, cfg.episodes)]
    results = parallel_map(_gpt_job, jobs, workers)
    trajs = [t for t, _ in results]
    return EvalResult(EvalReport.from_trajectories(label, cfg.task, trajs, g1), trajs, [p for _, p in results])


def evaluate_expert(policy, cfg: EvalConfig, label: str = "expert", record_physics: bool = False, workers: int = 1) -> EvalResult:
    jobs = [(cfg.env, cfg.task, policy, s, record_physics) for s in eval_seeds(cfg.seed, cfg.task, cfg.episodes)]
    results = parallel_map(_expert_job, jobs, workers)
    trajs = [t for t, _ in results]
    return EvalResult(EvalReport.from_trajectories(label, cfg.task, trajs), trajs, [p for _, p in results])


def evaluate_random(cfg: EvalConfig, label: str = "random") -> EvalResult:
    """Uniform-random meta-actions (baseline); action draws seeded per episode."""
    trajs = []
    for seed in eval_seeds(cfg.seed, cfg.task, cfg.episodes):
        env = IntersectionEnv(cfg.env, cfg.task)
        obs = env.reset(seed)
        rng = np.random.default_rng(derive_seed(seed, 59))
        states, actions, rewards = [], [], []
        while True:
            a = int(rng.integers(N_ACTIONS))
            states.append(obs.flat())
            actions.append(a)
            out = env.step(a)
            rewards.append(out.reward)
            if out.terminated:
                trajs.append(Trajectory(cfg.task, np.array(states), np.array(actions), np.array(rewards), out.cause, seed))
                break
            obs = out.obs
    return EvalResult(EvalReport.from_trajectories(label, cfg.task, trajs), trajs, [None] * len(trajs))


def default_g1(dataset: MixedDataset, task: TaskId, scale: float = 1.05) -> float:
    """``scale`` times the mean return of the task's successful expert episodes."""
    task = TaskId(task)
    trajs = [dataset.trajectories[i] for i in dataset.by_task[task]]
    if not trajs:
        raise ValueError(f"dataset has no trajectories for task {task.short!r}")
    wins = [t.total_return for t in trajs if t.success]
    base = float(np.mean(wins)) if wins else max(t.total_return for t in trajs)
    return quantize_rtg(scale * base)


def action_error(model: GPTModel, dataset: MixedDataset, n_batches: int = 10, batch_size: int = 64, seed: int = 0) -> float:
    """Argmax-mismatch rate against expert labels over task-uniform sampled windows."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cache = TokenCache(dataset)
    rng = np.random.default_rng(derive_seed(seed, 505))
    wrong = total = 0.0
    model.eval()
    with T.no_grad():
        for _ in range(n_batches):
            batch = cache.batch(dataset.sample_windows(rng, batch_size), model.config.context)
            logits = model(batch.tokens).value
            w = batch.weights.sum()
            wrong += masked_action_error(logits, batch.labels, batch.weights) * w
            total += w
    return wrong / total


# --------------------------------------------------------------------------- reports
def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def make_report(reports: list[EvalReport], csv_path: str | Path | None = None, text_path: str | Path | None = None) -> tuple[str, str]:
    """Render reports as CSV and as an aligned plain-text table."""
    if not reports:
        raise ValueError("make_report needs at least one report")
    rows = [r.row() for r in reports]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    csv_text = buf.getvalue()

    def cell(c, v):
        if v is None:
            return "-"
        if c in ("success_rate", "collision_rate", "timeout_rate", "ci95"):
            return f"{100 * v:.1f}%"
        if isinstance(v, float):
            return f"{v:.3f}"
        return str(v)

    table = [REPORT_COLUMNS] + [[cell(c, row[c]) for c in REPORT_COLUMNS] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    text = "\n".join(lines) + "\n"
    if csv_path is not None:
        Path(csv_path).write_text(csv_text, encoding="utf-8")
    if text_path is not None:
        Path(text_path).write_text(text, encoding="utf-8")
    return csv_text, text


def read_report_csv(path_or_text: str | Path) -> list[dict]:
    text = Path(path_or_text).read_text(encoding="utf-8") if isinstance(path_or_text, Path) else path_or_text
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for k, v in row.items():
            if v == "-":
                parsed[k] = None
            elif k in ("model", "task"):
                parsed[k] = v
            elif k == "episodes":
                parsed[k] = int(v)
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out
