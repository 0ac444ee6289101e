"""Attention-based policy and value networks for the single-task experts."""

from __future__ import annotations

import numpy as np

from ..numerics import tensor as T
from ..numerics.nn import MLP, Linear, Module, masked_attention, merge_heads, split_heads
from ..numerics.tensor import DiffArray


class AttentionTrunk(Module):
    """Per-row MLP encoder, ego-query multi-head attention, MLP decoder.

    Input rows ``(B, N, F)`` with presence ``(B, N)``; row 0 is the ego.
    Output ``(B, hidden)``.
    """

    def __init__(self, rng, n_features: int = 4, hidden: int = 64, n_heads: int = 2, feature_size: int = 128):
        if feature_size % n_heads:
            raise ValueError("feature_size must be divisible by n_heads")
        self.n_heads = n_heads
        self.encoder = MLP([n_features, hidden, hidden], rng)
        self.query = Linear(hidden, feature_size, rng)
        self.key = Linear(hidden, feature_size, rng)
        self.value = Linear(hidden, feature_size, rng)
        self.decoder = MLP([feature_size, hidden, hidden], rng)

    def __call__(self, rows, presence) -> DiffArray:
        rows = T.as_array(rows)
        presence = np.asarray(presence, dtype=bool)
        emb = self.encoder(rows)  # (B, N, H)
        ego = T.index(emb, (slice(None), slice(0, 1)))  # (B, 1, H)
        q = split_heads(self.query(ego), self.n_heads)  # (B, h, 1, d)
        k = split_heads(self.key(emb), self.n_heads)  # (B, h, N, d)
        v = split_heads(self.value(emb), self.n_heads)
        mask = presence[:, None, None, :]
        att = merge_heads(masked_attention(q, k, v, mask))  # (B, 1, F)
        att = T.reshape(att, (att.shape[0], att.shape[-1]))
        return self.decoder(att)


class AttentionPolicyNet(Module):
    def __init__(self, rng, n_features: int = 4, hidden: int = 64, n_heads: int = 2, feature_size: int = 128, n_actions: int = 3):
        self.trunk = AttentionTrunk(rng, n_features, hidden, n_heads, feature_size)
        self.head = Linear(hidden, n_actions, rng, std=0.01)

    def logits(self, rows, presence) -> DiffArray:
        return self.head(self.trunk(rows, presence))

    def __call__(self, rows, presence) -> DiffArray:
        return T.softmax(self.logits(rows, presence), axis=-1)


class ValueNet(Module):
    def __init__(self, rng, n_features: int = 4, hidden: int = 64, n_heads: int = 2, feature_size: int = 128):
        self.trunk = AttentionTrunk(rng, n_features, hidden, n_heads, feature_size)
        self.head = Linear(hidden, 1, rng)

    def __call__(self, rows, presence) -> DiffArray:
        out = self.head(self.trunk(rows, presence))
        return T.reshape(out, (out.shape[0],))


def policy_forward(net: AttentionPolicyNet, obs) -> np.ndarray:
    """Action probabilities for one :class:`ObservationMatrix` (no graph)."""
    with T.no_grad():
        probs = net(obs.rows[None], obs.presence[None])
    return probs.value[0]
