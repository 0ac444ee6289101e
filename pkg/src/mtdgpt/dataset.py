"""Expert trajectories, return-to-go tokens and the mixed three-task dataset.

Dataset file format (JSON Lines, one trajectory per line, keys sorted)::

    {"version": 1, "task": "left", "outcome": "arrived", "seed": 123,
     "steps": [[[s_1 ...], a_1, r_1], [[s_2 ...], a_2, r_2], ...],
     "rtg": [g_1, g_2, ...]}          # only in evaluation traces

``s_t`` is the flattened observation (N_obs x 4 values), ``a_t`` the action
index and ``r_t`` the step reward.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .kinematics import MetaAction
from .parallel import parallel_map
from .seeding import derive_seed
from .sim.env import Cause, EnvConfig, IntersectionEnv
from .sim.geometry import TaskId

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
N_ACTIONS = 3
PREV_ACTION_DIM = N_ACTIONS + 1  # one-hot plus the "no previous action" flag
SAMPLE_STREAM = 7


def token_dim(state_dim: int) -> int:
    return state_dim + PREV_ACTION_DIM + 1


@dataclass
class Trajectory:
    task: TaskId
    states: np.ndarray  # (T, state_dim)
    actions: np.ndarray  # (T,) int
    rewards: np.ndarray  # (T,)
    outcome: Cause
    seed: int | None = None
    rtg: np.ndarray | None = None  # conditioning RTG actually fed to a model (eval traces)

    def __post_init__(self):
        self.task = TaskId(self.task)
        self.outcome = Cause(self.outcome)
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n = len(self.actions)
        if n < 1:
            raise ValueError("a trajectory needs at least one step")
        if self.states.ndim != 2 or len(self.states) != n or len(self.rewards) != n:
            raise ValueError(f"misaligned trajectory: states {self.states.shape}, actions {n}, rewards {len(self.rewards)}")
        if self.states.shape[1] % 4:
            raise ValueError(f"state width {self.states.shape[1]} is not a multiple of 4")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("trajectory rewards must be finite")
        if np.any((self.actions < 0) | (self.actions >= N_ACTIONS)):
            raise ValueError("action index out of range")
        if self.rtg is not None:
            self.rtg = np.asarray(self.rtg, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def success(self) -> bool:
        return self.outcome == Cause.ARRIVED

    # ------------------------------------------------------------------ json
    def to_record(self) -> dict:
        rec = {
            "version": SCHEMA_VERSION,
            "task": self.task.short,
            "outcome": self.outcome.value,
            "seed": self.seed,
            "steps": [[s.tolist(), int(a), float(r)] for s, a, r in zip(self.states, self.actions, self.rewards)],
        }
        if self.rtg is not None:
            rec["rtg"] = self.rtg.tolist()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        if rec.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema version {rec.get('version')!r}")
        steps = rec["steps"]
        return cls(
            task=TaskId.parse(rec["task"]),
            states=np.array([s for s, _, _ in steps], dtype=np.float64),
            actions=np.array([a for _, a, _ in steps], dtype=np.int64),
            rewards=np.array([r for _, _, r in steps], dtype=np.float64),
            outcome=Cause(rec["outcome"]),
            seed=rec.get("seed"),
            rtg=rec.get("rtg"),
        )


def dumps_trajectory(traj: Trajectory) -> str:
    return json.dumps(traj.to_record(), sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for traj in trajectories:
            fh.write(dumps_trajectory(traj))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


# --------------------------------------------------------------------------- RTG and tokens
def compute_rtg(rewards) -> np.ndarray:
    """Suffix sums ``g_t = r_t + ... + r_T``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) == 0:
        raise ValueError("compute_rtg needs a non-empty 1-D reward sequence")
    g = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + acc
        g[t] = acc
    return g


def prev_action_code(prev: int | None) -> np.ndarray:
    code = np.zeros(PREV_ACTION_DIM)
    if prev is None:
        code[N_ACTIONS] = 1.0
    else:
        code[int(prev)] = 1.0
    return code


@dataclass
class TimestepToken:
    state: np.ndarray
    prev_action: np.ndarray  # 4 entries
    rtg: float
    label: int  # the action taken at this step (training target)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.state, self.prev_action, [self.rtg]])


def tokenize(traj: Trajectory, rtg: np.ndarray | None = None) -> list[TimestepToken]:
    """Token ``t`` carries ``(s_t, a_{t-1}, g_t)`` and is labelled with ``a_t``."""
    g = compute_rtg(traj.rewards) if rtg is None else rtg
    tokens = []
    for t in range(len(traj)):
        prev = None if t == 0 else int(traj.actions[t - 1])
        tokens.append(TimestepToken(traj.states[t].copy(), prev_action_code(prev), float(g[t]), int(traj.actions[t])))
    return tokens


def detokenize(tokens: list[TimestepToken]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`tokenize` on the stored fields: ``(states, actions, rtg)``."""
    if not tokens:
        raise ValueError("no tokens")
    for t in range(1, len(tokens)):
        if int(np.argmax(tokens[t].prev_action)) != tokens[t - 1].label:
            raise ValueError(f"token {t} prev_action disagrees with label of token {t - 1}")
    states = np.stack([tk.state for tk in tokens])
    actions = np.array([tk.label for tk in tokens], dtype=np.int64)
    rtg = np.array([tk.rtg for tk in tokens])
    return states, actions, rtg


def token_matrix(traj: Trajectory, rtg: np.ndarray | None = None) -> np.ndarray:
    """All tokens of ``traj`` stacked as a ``(T, token_dim)`` array."""
    n = len(traj)
    g = compute_rtg(traj.rewards) if rtg is None else np.asarray(rtg, dtype=np.float64)
    prev = np.zeros((n, PREV_ACTION_DIM))
    prev[0, N_ACTIONS] = 1.0
    prev[np.arange(1, n), traj.actions[:-1]] = 1.0
    return np.concatenate([traj.states, prev, g[:, None]], axis=1)


# --------------------------------------------------------------------------- rollouts
def greedy_action(probs: np.ndarray) -> int:
    return int(np.argmax(probs))


def run_policy_episode(env_config: EnvConfig, task: TaskId, policy, seed: int, greedy: bool = True, record_trace: bool = False):
    """One episode of an attention policy; returns ``(trajectory, physics_trace)``."""
    from .expert.networks import policy_forward

    env = IntersectionEnv(env_config, task)
    obs = env.reset(seed, record_trace=record_trace)
    rng = np.random.default_rng(derive_seed(seed, 31))
    states, actions, rewards = [], [], []
    while True:
        probs = policy_forward(policy, obs)
        a = greedy_action(probs) if greedy else int(rng.choice(N_ACTIONS, p=probs))
        states.append(obs.flat())
        actions.append(a)
        out = env.step(MetaAction(a))
        rewards.append(out.reward)
        if out.terminated:
            traj = Trajectory(task, np.array(states), np.array(actions), np.array(rewards), out.cause, seed)
            return traj, env.trace
        obs = out.obs


def _run_expert_episode(args) -> Trajectory:
    env_config, task, policy, seed, greedy = args
    return run_policy_episode(env_config, task, policy, seed, greedy)[0]


KEEP_FILTERS: dict[str, Callable[[Trajectory], bool]] = {
    "all": lambda traj: True,
    "successes": lambda traj: traj.success,
}


def sample_seeds(seed: int, task: TaskId, n: int) -> list[int]:
    return [derive_seed(seed, SAMPLE_STREAM, int(task), k) for k in range(n)]


def rollout_expert(
    env_config: EnvConfig,
    task: TaskId,
    policy,
    episodes: int,
    seed: int,
    keep_filter: str = "all",
    greedy: bool = True,
    workers: int = 1,
) -> list[Trajectory]:
    """Record ``episodes`` expert episodes as trajectories.

    Episodes use seeds derived from ``(seed, task, k)``; the filter is applied
    afterwards, so the result may hold fewer than ``episodes`` trajectories.
    """
    if keep_filter not in KEEP_FILTERS:
        raise ValueError(f"unknown keep_filter {keep_filter!r}; choose from {sorted(KEEP_FILTERS)}")
    task = TaskId(task)
    jobs = [(env_config, task, policy, s, greedy) for s in sample_seeds(seed, task, episodes)]
    trajs = parallel_map(_run_expert_episode, jobs, workers)
    keep = KEEP_FILTERS[keep_filter]
    return [t for t in trajs if keep(t)]


# --------------------------------------------------------------------------- mixed dataset
@dataclass
class MixedDataset:
    trajectories: list[Trajectory]
    by_task: dict[TaskId, list[int]] = field(init=False)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("dataset is empty")
        widths = {t.states.shape[1] for t in self.trajectories}
        if len(widths) != 1:
            raise ValueError(f"inconsistent state widths {sorted(widths)}")
        self.by_task = {task: [] for task in TaskId}
        for i, t in enumerate(self.trajectories):
            self.by_task[t.task].append(i)

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def token_dim(self) -> int:
        return token_dim(self.state_dim)

    def __len__(self) -> int:
        return len(self.trajectories)

    def task_counts(self) -> dict[TaskId, int]:
        return {task: len(ix) for task, ix in self.by_task.items()}

    def save(self, path: str | Path) -> None:
        write_jsonl(path, self.trajectories)

    @classmethod
    def load(cls, path: str | Path) -> "MixedDataset":
        return cls(read_jsonl(path))

    def window_index(self) -> np.ndarray:
        """Every (trajectory, start) pair; each start yields one window."""
        return np.array([(i, s) for i, t in enumerate(self.trajectories) for s in range(len(t))], dtype=np.int64)

    def sample_windows(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` (trajectory, start) pairs: task uniform, then trajectory, then start."""
        tasks = [task for task in TaskId if self.by_task[task]]
        out = np.empty((n, 2), dtype=np.int64)
        for k in range(n):
            task = tasks[int(rng.integers(len(tasks)))]
            i = self.by_task[task][int(rng.integers(len(self.by_task[task])))]
            out[k] = (i, int(rng.integers(len(self.trajectories[i]))))
        return out


def mix_and_persist(
    left: list[Trajectory],
    straight: list[Trajectory],
    right: list[Trajectory],
    path: str | Path | None = None,
) -> MixedDataset:
    """Truncate each task to the smallest count and store left, straight, right."""
    groups = {TaskId.TURN_LEFT: left, TaskId.GO_STRAIGHT: straight, TaskId.TURN_RIGHT: right}
    for task, trajs in groups.items():
        if not trajs:
            raise ValueError(f"no trajectories for task {task.short!r}")
        if any(t.task != task for t in trajs):
            raise ValueError(f"trajectory list for {task.short!r} contains another task")
    n = min(len(v) for v in groups.values())
    mixed = MixedDataset([t for task in TaskId for t in groups[task][:n]])
    if path is not None:
        mixed.save(path)
    return mixed


# --------------------------------------------------------------------------- batching
@dataclass
class WindowBatch:
    tokens: np.ndarray  # (B, K, D)
    labels: np.ndarray  # (B, K) int
    weights: np.ndarray  # (B, K) 1 for real positions, 0 for padding


class TokenCache:
    """Token matrices for every trajectory of a dataset, built once."""

    def __init__(self, dataset: MixedDataset):
        self.dataset = dataset
        self.tokens = [token_matrix(t) for t in dataset.trajectories]
        self.labels = [t.actions for t in dataset.trajectories]

    def batch(self, pairs: np.ndarray, context: int) -> WindowBatch:
        b = len(pairs)
        d = self.dataset.token_dim
        tokens = np.zeros((b, context, d))
        labels = np.zeros((b, context), dtype=np.int64)
        weights = np.zeros((b, context))
        for k, (i, s) in enumerate(pairs):
            seg = self.tokens[i][s : s + context]
            n = len(seg)
            tokens[k, :n] = seg
            labels[k, :n] = self.labels[i][s : s + n]
            weights[k, :n] = 1.0
        return WindowBatch(tokens, labels, weights)
