"""Decoder-only multi-task decision transformer over (state, previous action, RTG) tokens."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import N_ACTIONS, MixedDataset, TokenCache
from .numerics import tensor as T
from .numerics.checkpoint import load_arrays, save_arrays
from .numerics.nn import LayerNorm, Linear, Module, causal_mask, cross_entropy, masked_attention, merge_heads, split_heads
from .numerics.optim import Adam
from .numerics.tensor import DiffArray
from .seeding import derive_seed

log = logging.getLogger(__name__)

GPT_LOG_FIELDS = ["epoch", "update", "loss", "action_error", "grad_norm", "dropout_key"]


@dataclass(frozen=True)
class GPTConfig:
    n_layers: int = 3
    embed_dim: int = 128
    n_heads: int = 4
    context: int = 30
    dropout: float = 0.1
    epochs: int = 100
    steps_per_epoch: int = 10_000
    batch_size: int = 64
    lr: float = 3e-4
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if self.context < 1 or self.n_layers < 1:
            raise ValueError("context and n_layers must be at least 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("batch_size, epochs and steps_per_epoch must be positive")


def sinusoidal_pe(n_pos: int, dim: int) -> np.ndarray:
    """``pe[p, 2i] = sin(p / 10000^(2i/dim))``, ``pe[p, 2i+1] = cos(...)``."""
    pos = np.arange(n_pos)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)
    pe = np.zeros((n_pos, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return pe


class TokenEmbed(Module):
    """Two-layer perceptron from token vector to model width."""

    def __init__(self, token_dim: int, dim: int, rng):
        self.fc1 = Linear(token_dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer layer: masked self-attention then a GELU MLP."""

    def __init__(self, dim: int, n_heads: int, rng):
        self.n_heads = n_heads
        self.ln1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.ln2 = LayerNorm(dim)
        self.fc = Linear(dim, 4 * dim, rng)
        self.fc_out = Linear(4 * dim, dim, rng)

    def __call__(self, x, mask, drop):
        h = self.ln1(x)
        q, k, v = (split_heads(f(h), self.n_heads) for f in (self.q, self.k, self.v))
        x = x + drop(self.proj(merge_heads(masked_attention(q, k, v, mask))))
        return x + drop(self.fc_out(T.gelu(self.fc(self.ln2(x)))))


class GPTModel(Module):
    def __init__(self, config: GPTConfig, token_dim: int, seed: int = 0):
        rng = np.random.default_rng(derive_seed(seed, 303))
        self.config = config
        self.token_dim = token_dim
        self.embed = TokenEmbed(token_dim, config.embed_dim, rng)
        self.blocks = [Block(config.embed_dim, config.n_heads, rng) for _ in range(config.n_layers)]
        self.ln_f = LayerNorm(config.embed_dim)
        self.head = Linear(config.embed_dim, N_ACTIONS, rng)
        self.pe = sinusoidal_pe(config.context, config.embed_dim)

    def embed_tokens(self, tokens) -> DiffArray:
        """``e_t = perceptron(x_t) + PE(t)`` for a ``(..., n, token_dim)`` input."""
        tokens = np.asarray(tokens, dtype=np.float64)
        n = tokens.shape[-2]
        if tokens.shape[-1] != self.token_dim:
            raise ValueError(f"token width {tokens.shape[-1]} does not match model token width {self.token_dim}")
        if n < 1:
            raise ValueError("empty token sequence")
        if n > self.config.context:
            raise ValueError(f"sequence of {n} tokens exceeds context {self.config.context}; window it first")
        return self.embed(DiffArray(tokens)) + self.pe[:n]

    def __call__(self, tokens, rng: np.random.Generator | None = None) -> DiffArray:
        """Logits ``(..., n, 3)``; dropout is active only in training mode."""
        rate = self.config.dropout if self.training else 0.0

        def drop(x):
            return T.dropout(x, rate, rng, self.training and rate > 0)

        x = drop(self.embed_tokens(tokens))
        mask = causal_mask(x.shape[-2])
        for block in self.blocks:
            x = block(x, mask, drop)
        return self.head(self.ln_f(x))


def gpt_forward(model: GPTModel, tokens, rng: np.random.Generator | None = None) -> DiffArray:
    return model(tokens, rng)


def parameter_count(config: GPTConfig, token_dim: int) -> int:
    e = config.embed_dim
    embed = token_dim * e + e + e * e + e
    block = 2 * e + 4 * (e * e + e) + 2 * e + (e * 4 * e + 4 * e) + (4 * e * e + e)
    return embed + config.n_layers * block + 2 * e + e * N_ACTIONS + N_ACTIONS


def predict_action(model: GPTModel, window) -> tuple[int, np.ndarray]:
    """Greedy action at the last position of ``window`` (``(n, token_dim)``, n <= K)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError(f"window must be 2-D (n, token_dim), got shape {window.shape}")
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            logits = model(window).value[-1]
    finally:
        model.train(was_training)
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    return int(np.argmax(logits)), probs


# --------------------------------------------------------------------------- checkpoints
def save_gpt(path: str | Path, model: GPTModel, extra: dict | None = None) -> None:
    meta = {"kind": "gpt", "config": asdict(model.config), "token_dim": model.token_dim, **(extra or {})}
    save_arrays(path, model.state_dict(), meta)


def load_gpt(path: str | Path) -> tuple[GPTModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "gpt":
        raise ValueError(f"{path} is not a GPT checkpoint")
    model = GPTModel(GPTConfig(**meta["config"]), int(meta["token_dim"]))
    model.load_state_dict(arrays)
    model.eval()
    return model, meta


# --------------------------------------------------------------------------- training
def masked_action_error(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    wrong = (np.argmax(logits, axis=-1) != labels) * weights
    return float(wrong.sum() / weights.sum())


@dataclass
class GPTResult:
    model: GPTModel
    curve: list[dict] = field(default_factory=list)
    epoch_checkpoints: list[Path] = field(default_factory=list)


def train_gpt(
    dataset: MixedDataset,
    config: GPTConfig,
    seed: int = 0,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    max_updates: int | None = None,
) -> GPTResult:
    """Cross-entropy training over shuffled K-windows.

    Each epoch is one shuffled pass over every window start (capped at
    ``steps_per_epoch`` batches).  Dropout for update ``u`` draws from
    ``default_rng([seed, u])``, which the log records as ``dropout_key``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cache = TokenCache(dataset)
    windows = dataset.window_index()
    model = GPTModel(config, dataset.token_dim, seed)
    model.train()
    opt = Adam(model.parameters(), lr=config.lr, max_grad_norm=config.max_grad_norm)
    shuffle_rng = np.random.default_rng(derive_seed(seed, 404))
    result = GPTResult(model)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w", newline="") if log_path is not None else None
    writer = csv.DictWriter(log_file, fieldnames=GPT_LOG_FIELDS) if log_file else None
    if writer:
        writer.writeheader()
    update = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = windows[shuffle_rng.permutation(len(windows))]
            n_batches = min(config.steps_per_epoch, math.ceil(len(order) / config.batch_size))
            for b in range(n_batches):
                if max_updates is not None and update >= max_updates:
                    break
                batch = cache.batch(order[b * config.batch_size : (b + 1) * config.batch_size], config.context)
                drop_rng = np.random.default_rng([seed, update])
                opt.zero_grad()
                logits = model(batch.tokens, drop_rng)
                loss = cross_entropy(logits, batch.labels, batch.weights)
                loss.backward()
                norm = opt.step()
                row = {
                    "epoch": epoch,
                    "update": update,
                    "loss": float(loss.value),
                    "action_error": masked_action_error(logits.value, batch.labels, batch.weights),
                    "grad_norm": float(norm),
                    "dropout_key": f"{seed}:{update}",
                }
                update += 1
                result.curve.append(row)
                if writer:
                    writer.writerow(row)
            if log_file:
                log_file.flush()
            if result.curve:
                recent = [r for r in result.curve if r["epoch"] == epoch]
                if recent:
                    log.info(
                        "gpt epoch %d updates=%d loss=%.4f err=%.3f",
                        epoch, update, np.mean([r["loss"] for r in recent]), np.mean([r["action_error"] for r in recent]),
                    )
            if ckpt_dir is not None:
                path = ckpt_dir / f"gpt_epoch_{epoch:03d}.ckpt"
                save_gpt(path, model, {"seed": seed, "epoch": epoch, "updates": update})
                result.epoch_checkpoints.append(path)
            if max_updates is not None and update >= max_updates:
                break
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return result


def evaluate_windows(model: GPTModel, dataset: MixedDataset, pairs: np.ndarray | None = None, batch_size: int = 256):
    """Masked CE and action error of ``model`` over ``pairs`` (default: every window)."""
    cache = TokenCache(dataset)
    pairs = dataset.window_index() if pairs is None else pairs
    total_loss = total_wrong = total_w = 0.0
    model.eval()
    with T.no_grad():
        for start in range(0, len(pairs), batch_size):
            batch = cache.batch(pairs[start : start + batch_size], model.config.context)
            logits = model(batch.tokens)
            w = batch.weights.sum()
            total_loss += cross_entropy(logits, batch.labels, batch.weights).item() * w
            total_wrong += masked_action_error(logits.value, batch.labels, batch.weights) * w
            total_w += w
    return total_loss / total_w, total_wrong / total_w
