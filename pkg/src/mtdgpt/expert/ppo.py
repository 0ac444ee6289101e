"""Clipped PPO with GAE for the single-task attention experts."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..kinematics import MetaAction
from ..numerics import tensor as T
from ..numerics.checkpoint import load_arrays, save_arrays
from ..numerics.optim import Adam
from ..numerics.tensor import DiffArray, NumericFault
from ..seeding import derive_seed
from ..sim.env import Cause, EnvConfig, IntersectionEnv
from ..sim.geometry import TaskId
from .networks import AttentionPolicyNet, ValueNet

log = logging.getLogger(__name__)

LOG_FIELDS = [
    "iteration",
    "env_steps",
    "episodes",
    "mean_return",
    "success_rate",
    "policy_loss",
    "value_loss",
    "entropy",
]


@dataclass(frozen=True)
class ExpertConfig:
    total_steps: int = 20000
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    rollout_length: int = 512
    minibatch_size: int = 64
    update_epochs: int = 4
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: int = 64
    n_heads: int = 2
    feature_size: int = 128

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.total_steps <= 0 or self.rollout_length <= 0 or self.minibatch_size <= 0:
            raise ValueError("step counts must be positive")


def gae_advantages(rewards, values, terminals, gamma: float, lam: float, bootstrap: float = 0.0, normalize: bool = True):
    """Generalised advantage estimates and the matching value targets.

    ``terminals[t]`` marks that the episode ended after step ``t`` (no
    bootstrapping across it).  ``bootstrap`` is V(s_T) for a truncated tail.
    Returns ``(advantages, returns)``; ``returns`` use the raw advantages.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    if not (len(rewards) == len(values) == len(terminals)):
        raise ValueError(f"length mismatch: rewards {len(rewards)}, values {len(values)}, terminals {len(terminals)}")
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        next_value = bootstrap if t == n - 1 else values[t + 1]
        nonterminal = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    returns = adv + values
    if normalize and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-12)
    return adv, returns


def clipped_surrogate(ratio: DiffArray, advantages, eps: float) -> DiffArray:
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    adv = np.asarray(advantages, dtype=np.float64)
    return T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, 1.0 - eps, 1.0 + eps), adv))


@dataclass
class Batch:
    rows: np.ndarray
    presence: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def subset(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in ("rows", "presence", "actions", "old_logp", "advantages", "returns")))


def ppo_loss(
    batch: Batch,
    policy: AttentionPolicyNet,
    value_net: ValueNet | None,
    eps: float,
    value_coef: float = 0.5,
    entropy_coef: float = 0.01,
) -> tuple[DiffArray, dict]:
    """Negative clipped surrogate plus value regression minus entropy bonus."""
    logp_all = T.log_softmax(policy.logits(batch.rows, batch.presence), axis=-1)
    logp = T.take_last(logp_all, batch.actions)
    ratio = T.exp(logp - batch.old_logp)
    if not np.all(np.isfinite(ratio.value)):
        raise NumericFault("ppo_loss", "ratio")
    surrogate = T.mean(clipped_surrogate(ratio, batch.advantages, eps))
    entropy = -T.mean(T.sum_(T.mul(T.exp(logp_all), logp_all), axis=-1))
    loss = -surrogate - entropy_coef * entropy
    value_loss = 0.0
    if value_net is not None:
        v = value_net(batch.rows, batch.presence)
        vl = T.mean(T.square(v - batch.returns))
        loss = loss + value_coef * vl
        value_loss = float(vl.value)
    stats = {"policy_loss": float(-surrogate.value), "value_loss": value_loss, "entropy": float(entropy.value)}
    return loss, stats


@dataclass
class ExpertResult:
    policy: AttentionPolicyNet
    value: ValueNet
    curve: list[dict] = field(default_factory=list)
    best_success: float = -1.0


def build_networks(config: ExpertConfig, seed: int, n_features: int = 4):
    rng = np.random.default_rng(derive_seed(seed, 101))
    policy = AttentionPolicyNet(rng, n_features, config.hidden, config.n_heads, config.feature_size)
    value = ValueNet(rng, n_features, config.hidden, config.n_heads, config.feature_size)
    return policy, value


def save_expert(path: str | Path, policy: AttentionPolicyNet, task: TaskId, config: ExpertConfig, extra: dict | None = None) -> None:
    meta = {"kind": "expert", "task": int(task), "config": asdict(config), **(extra or {})}
    save_arrays(path, policy.state_dict(), meta)


def load_expert(path: str | Path) -> tuple[AttentionPolicyNet, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"expert checkpoint not found: {path}")
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "expert":
        raise ValueError(f"{path} is not an expert checkpoint")
    config = ExpertConfig(**meta["config"])
    policy, _ = build_networks(config, 0)
    policy.load_state_dict(arrays)
    return policy, meta


def train_expert(
    task: TaskId,
    config: ExpertConfig = ExpertConfig(),
    seed: int = 0,
    env_config: EnvConfig = EnvConfig(),
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> ExpertResult:
    """Alternate rollouts and clipped-PPO updates until ``total_steps``.

    The returned policy carries the parameters of the iteration with the best
    rollout success rate (ties broken by mean return).
    """
    task = TaskId(task)
    policy, value_net = build_networks(config, seed)
    params = policy.parameters() + value_net.parameters()
    opt = Adam(params, lr=config.lr, max_grad_norm=config.max_grad_norm)
    rng = np.random.default_rng(derive_seed(seed, 202))
    env = IntersectionEnv(env_config, task)
    episode_idx = 0
    obs = env.reset(derive_seed(seed, int(task), episode_idx))
    ep_return = 0.0
    result = ExpertResult(policy, value_net)
    best_key = (-1.0, -np.inf)
    best_state = policy.state_dict()
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        writer.writeheader()

    env_steps = 0
    iteration = 0
    try:
        while env_steps < config.total_steps:
            n = min(config.rollout_length, config.total_steps - env_steps)
            rows = np.zeros((n, env_config.n_obs, 4))
            presence = np.zeros((n, env_config.n_obs), dtype=bool)
            actions = np.zeros(n, dtype=np.int64)
            logps = np.zeros(n)
            values = np.zeros(n)
            rewards = np.zeros(n)
            terminals = np.zeros(n, dtype=bool)
            finished_returns, finished_success = [], []
            for t in range(n):
                rows[t], presence[t] = obs.rows, obs.presence
                with T.no_grad():
                    probs = policy(obs.rows[None], obs.presence[None]).value[0]
                    values[t] = value_net(obs.rows[None], obs.presence[None]).value[0]
                a = int(rng.choice(3, p=probs))
                actions[t] = a
                logps[t] = np.log(probs[a])
                try:
                    out = env.step(MetaAction(a))
                except Exception as exc:  # environment fault: report where it happened
                    raise RuntimeError(f"environment fault at env step {env_steps + t} (seed {seed}): {exc}") from exc
                rewards[t] = out.reward
                ep_return += out.reward
                if out.terminated:
                    terminals[t] = True
                    finished_returns.append(ep_return)
                    finished_success.append(out.cause == Cause.ARRIVED)
                    episode_idx += 1
                    ep_return = 0.0
                    obs = env.reset(derive_seed(seed, int(task), episode_idx))
                else:
                    obs = out.obs
            env_steps += n
            with T.no_grad():
                bootstrap = 0.0 if terminals[-1] else float(value_net(obs.rows[None], obs.presence[None]).value[0])
            adv, returns = gae_advantages(rewards, values, terminals, config.gamma, config.gae_lambda, bootstrap)
            batch = Batch(rows, presence, actions, logps, adv, returns)

            stats_acc = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
            n_updates = 0
            for _ in range(config.update_epochs):
                order = rng.permutation(n)
                for start in range(0, n, config.minibatch_size):
                    mb = batch.subset(order[start : start + config.minibatch_size])
                    opt.zero_grad()
                    loss, stats = ppo_loss(mb, policy, value_net, config.clip_eps, config.value_coef, config.entropy_coef)
                    loss.backward()
                    opt.step()
                    for k in stats_acc:
                        stats_acc[k] += stats[k]
                    n_updates += 1

            iteration += 1
            success = float(np.mean(finished_success)) if finished_success else 0.0
            mean_ret = float(np.mean(finished_returns)) if finished_returns else float("nan")
            row = {
                "iteration": iteration,
                "env_steps": env_steps,
                "episodes": len(finished_returns),
                "mean_return": mean_ret,
                "success_rate": success,
                **{k: v / max(n_updates, 1) for k, v in stats_acc.items()},
            }
            result.curve.append(row)
            if writer is not None:
                writer.writerow(row)
                log_file.flush()
            log.info("expert %s it=%d steps=%d return=%.3f success=%.2f", task.short, iteration, env_steps, mean_ret, success)
            key = (success, mean_ret if np.isfinite(mean_ret) else -np.inf)
            if finished_success and key >= best_key:
                best_key = key
                best_state = policy.state_dict()
                result.best_success = success
    finally:
        if log_file is not None:
            log_file.close()

    policy.load_state_dict(best_state)
    if checkpoint_path is not None:
        save_expert(checkpoint_path, policy, task, config, {"seed": seed, "best_success": result.best_success})
    return result
