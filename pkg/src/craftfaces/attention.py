"""Scaled dot-product attention with an optional identity channel.

The identity variant augments queries and keys with a shared embedding:

    Q' = X W_q + 1 (id U_q)        K' = X W_k + 1 (id U_k)

Every spatial token receives the same identity term, which is algebraically
the block product [X ; 1 id][W ; U]. Values are left untouched, so the
identity code biases where attention looks without rewriting content.
Single head, no positional encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import softmax_rows, tensor

__all__ = [
    "AttentionWeights",
    "ExtendedAttentionWeights",
    "self_attention",
    "identity_self_attention",
    "cross_attention",
    "attention_map",
]


@dataclass(frozen=True)
class AttentionWeights:
    """Projection maps W_q, W_k, W_v, all with head dimension d columns.

    For cross-attention, W_k and W_v act on the conditioning dimension
    instead of the token dimension.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        d = self.w_q.shape[1]
        if self.w_k.shape[1] != d or self.w_v.shape[1] != d:
            raise ShapeError(
                f"attention weights must share head dim: "
                f"{self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}"
            )

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1]


@dataclass(frozen=True)
class ExtendedAttentionWeights:
    """Base weights plus identity-block columns U_q, U_k (d_id x d)."""

    base: AttentionWeights
    u_q: np.ndarray
    u_k: np.ndarray

    def __post_init__(self):
        d = self.base.head_dim
        if self.u_q.shape[1] != d or self.u_k.shape[1] != d:
            raise ShapeError(
                f"identity blocks must share head dim {d}: "
                f"{self.u_q.shape}, {self.u_k.shape}"
            )
        if self.u_q.shape[0] != self.u_k.shape[0]:
            raise ShapeError(
                f"identity blocks must share id dim: {self.u_q.shape} vs {self.u_k.shape}"
            )

    @property
    def id_dim(self) -> int:
        return self.u_q.shape[0]


def _check_tokens(tokens: np.ndarray, w: np.ndarray, what: str) -> np.ndarray:
    tokens = tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != w.shape[0]:
        raise ShapeError(f"{what}: tokens {tokens.shape} vs weight {w.shape}")
    return tokens


def _scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    d = q.shape[1]
    return (q @ k.T) / np.sqrt(float(d))


def self_attention(tokens: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with Q, K, V projected from ``tokens``."""
    tokens = _check_tokens(tokens, w.w_q, "self_attention")
    q = tokens @ w.w_q
    k = tokens @ w.w_k
    v = tokens @ w.w_v
    return softmax_rows(_scores(q, k)) @ v


def _augmented_qk(tokens: np.ndarray, identity: np.ndarray, w: ExtendedAttentionWeights):
    identity = tensor(identity).reshape(-1)
    if identity.shape[0] != w.id_dim:
        raise ShapeError(
            f"identity embedding dim {identity.shape[0]} vs identity block {w.u_q.shape}"
        )
    q = tokens @ w.base.w_q + identity @ w.u_q
    k = tokens @ w.base.w_k + identity @ w.u_k
    return q, k


def identity_self_attention(
    tokens: np.ndarray, identity: np.ndarray, w: ExtendedAttentionWeights
) -> np.ndarray:
    """Self-attention whose Q and K carry a shared identity embedding.

    The same embedding augments every row, so equal (tokens, identity)
    inputs produce identical attention regardless of batch or call site.
    A zero embedding reduces exactly to ``self_attention`` on the base
    weights.
    """
    tokens = _check_tokens(tokens, w.base.w_q, "identity_self_attention")
    q, k = _augmented_qk(tokens, identity, w)
    v = tokens @ w.base.w_v
    return softmax_rows(_scores(q, k)) @ v


def cross_attention(
    tokens: np.ndarray, cond_tokens: np.ndarray, w: AttentionWeights
) -> np.ndarray:
    """Queries from ``tokens``, keys and values from ``cond_tokens``."""
    tokens = _check_tokens(tokens, w.w_q, "cross_attention")
    cond_tokens = _check_tokens(cond_tokens, w.w_k, "cross_attention (conditioning)")
    q = tokens @ w.w_q
    k = cond_tokens @ w.w_k
    v = cond_tokens @ w.w_v
    return softmax_rows(_scores(q, k)) @ v


def attention_map(
    tokens: np.ndarray,
    identity: np.ndarray | None,
    w: AttentionWeights | ExtendedAttentionWeights,
) -> np.ndarray:
    """Post-softmax attention matrix (n x n), without applying V.

    With ``identity=None`` the base weights are used; an
    ExtendedAttentionWeights argument then contributes only its base.
    """
    if identity is None:
        base = w.base if isinstance(w, ExtendedAttentionWeights) else w
        tokens = _check_tokens(tokens, base.w_q, "attention_map")
        q = tokens @ base.w_q
        k = tokens @ base.w_k
    else:
        if not isinstance(w, ExtendedAttentionWeights):
            raise ShapeError("attention_map: identity embedding requires extended weights")
        tokens = _check_tokens(tokens, w.base.w_q, "attention_map")
        q, k = _augmented_qk(tokens, identity, w)
    return softmax_rows(_scores(q, k))
