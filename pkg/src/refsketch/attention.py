"""Attention primitives used by the cross-image hooks.

All functions are pure: they never mutate their inputs and hold no state.
Matrices are 2-D numpy arrays with one row per token.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class AttentionFeatures:
    """Projected query/key/value blocks for one layer at one timestep."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    layer_id: str = ""
    resolution: int = 0
    timestep: int = -1

    def __post_init__(self):
        check_qkv(self.Q, self.K, self.V)

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    def replace(self, **changes) -> "AttentionFeatures":
        kw = dict(Q=self.Q, K=self.K, V=self.V, layer_id=self.layer_id,
                  resolution=self.resolution, timestep=self.timestep)
        kw.update(changes)
        return AttentionFeatures(**kw)


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic attention weights ``A`` and the attended output ``phi``."""

    A: np.ndarray
    phi: np.ndarray
    values: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


def check_qkv(Q, K, V):
    for name, m in (("Q", Q), ("K", K), ("V", V)):
        if np.ndim(m) != 2:
            raise ShapeError(f"{name} must be 2-D, got shape {np.shape(m)}")
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"inner dimension mismatch: Q has d={Q.shape[1]}, K has d={K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ShapeError(f"key count mismatch: K has {K.shape[0]} rows, V has {V.shape[0]}")
    if Q.shape[1] == 0:
        raise ShapeError("head dimension d must be positive")
    for name, m in (("Q", Q), ("K", K), ("V", V)):
        if not np.isfinite(m).all():
            raise DomainError(f"{name} contains non-finite entries")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_attention(feat: AttentionFeatures) -> AttentionMap:
    """softmax(Q K^T / sqrt(d)) and its product with V."""
    Q, K, V = feat.Q, feat.K, feat.V
    A = softmax_rows(Q @ K.T / np.sqrt(Q.shape[1]))
    return AttentionMap(A=A, phi=A @ V, values=V)


def mix_kv(K_ref, V_ref, K_cnt, V_cnt, alpha: float):
    """Add ``alpha`` times the content keys/values onto the reference ones."""
    K_ref, V_ref, K_cnt, V_cnt = map(np.asarray, (K_ref, V_ref, K_cnt, V_cnt))
    if K_ref.shape != K_cnt.shape:
        raise ShapeError(f"key shapes differ: {K_ref.shape} vs {K_cnt.shape}")
    if V_ref.shape != V_cnt.shape:
        raise ShapeError(f"value shapes differ: {V_ref.shape} vs {V_cnt.shape}")
    if not np.isfinite(alpha):
        raise DomainError(f"alpha must be finite, got {alpha}")
    if alpha == 0:
        return K_ref.copy(), V_ref.copy()
    return K_ref + alpha * K_cnt, V_ref + alpha * V_cnt


def blend_query(Q_cont, Q_ske, gamma: float) -> np.ndarray:
    """Convex blend ``gamma * Q_cont + (1 - gamma) * Q_ske``."""
    Q_cont, Q_ske = np.asarray(Q_cont), np.asarray(Q_ske)
    if Q_cont.shape != Q_ske.shape:
        raise ShapeError(f"query shapes differ: {Q_cont.shape} vs {Q_ske.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    if gamma == 0:
        return Q_ske.copy()
    if gamma == 1:
        return Q_cont.copy()
    return gamma * Q_cont + (1.0 - gamma) * Q_ske


def enhance_contrast(attn: AttentionMap, zeta: float) -> AttentionMap:
    """Scale each row's deviation from its mean by ``zeta``.

    Rows that leave the simplex are clipped at zero and renormalised so the
    result is still a valid attention distribution. ``phi`` is recomputed when
    the map carries its values.
    """
    if not zeta > 0:
        raise DomainError(f"zeta must be positive, got {zeta}")
    A = attn.A
    if zeta == 1:
        return attn
    mu = A.mean(axis=-1, keepdims=True)
    out = (A - mu) * zeta + mu
    if (out < 0).any():
        out = np.clip(out, 0.0, None)
        out = out / out.sum(axis=-1, keepdims=True)
    phi = out @ attn.values if attn.values is not None else attn.phi
    return AttentionMap(A=out, phi=phi, values=attn.values)


def _mask_vector(mask: Any, n: int) -> np.ndarray:
    grid = np.asarray(getattr(mask, "grid", mask))
    if grid.size != n:
        raise ShapeError(f"mask has {grid.size} cells but the key grid has {n} positions")
    return grid.reshape(-1).astype(bool)


def gate_kv_by_mask(K_ske, V_ske, K_cnt, V_cnt, mask):
    """Keep mixed keys/values at foreground positions, content ones elsewhere."""
    K_ske, V_ske, K_cnt, V_cnt = map(np.asarray, (K_ske, V_ske, K_cnt, V_cnt))
    if K_ske.shape != K_cnt.shape or V_ske.shape != V_cnt.shape:
        raise ShapeError("mixed and content key/value shapes differ")
    fg = _mask_vector(mask, K_ske.shape[0])[:, None]
    return np.where(fg, K_ske, K_cnt), np.where(fg, V_ske, V_cnt)
