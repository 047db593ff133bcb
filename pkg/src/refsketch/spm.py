"""Semantic preservation: contour-query injection and text-similarity guidance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .attention import blend_query
from .errors import BackendError, DomainError, NumericError, ShapeError

Window = Tuple[int, int]


def in_window(step: int, window: Optional[Window]) -> bool:
    """Inclusive window test; ``None`` means always on."""
    return window is None or window[0] <= step <= window[1]


@dataclass(frozen=True)
class SemanticGuidanceConfig:
    lambda_sem: float = 0.1
    gamma: float = 0.25
    guidance_window: Window = (20, 100)

    def __post_init__(self):
        if self.lambda_sem < 0:
            raise DomainError(f"lambda_sem must be non-negative, got {self.lambda_sem}")
        if not 0 <= self.gamma <= 1:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")


def semantic_loss(decoded_image: np.ndarray, prompt: str, scorer, lambda_sem: float) -> float:
    """``lambda_sem`` times the scorer's image-text similarity."""
    if lambda_sem == 0:
        return 0.0
    try:
        sim = float(scorer.similarity(decoded_image, prompt))
    except Exception as exc:
        raise BackendError(f"scorer failed on prompt {prompt!r}: {exc}") from exc
    if not np.isfinite(sim):
        raise BackendError(f"scorer returned non-finite similarity for {prompt!r}")
    return lambda_sem * sim


def semantic_gradient(z: np.ndarray, decode: Callable[[np.ndarray], np.ndarray], prompt: str,
                      scorer, probes: int = 4, step_size: float = 1e-3,
                      seed=0) -> np.ndarray:
    """Two-point zeroth-order estimate of d similarity(decode(z), prompt) / dz.

    Probe directions come from a generator seeded with ``seed`` so the
    estimate is reproducible.
    """
    rng = np.random.default_rng(seed)
    grad = np.zeros_like(z)
    for _ in range(probes):
        u = rng.standard_normal(z.shape)
        hi = semantic_loss(decode(z + step_size * u), prompt, scorer, 1.0)
        lo = semantic_loss(decode(z - step_size * u), prompt, scorer, 1.0)
        grad += (hi - lo) / (2 * step_size) * u
    return grad / max(probes, 1)


def apply_semantic_guidance(z_t: np.ndarray, grad: np.ndarray, lambda_sem: float, step: int,
                            window: Optional[Window] = None) -> np.ndarray:
    """Ascend the similarity: ``z_t + lambda_sem * grad`` inside the window."""
    z_t, grad = np.asarray(z_t), np.asarray(grad)
    if grad.shape != z_t.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match latent {z_t.shape}")
    if not in_window(step, window) or lambda_sem == 0:
        return z_t
    if not np.isfinite(grad).all():
        raise NumericError(f"non-finite semantic gradient at step {step}", step=step)
    return z_t + lambda_sem * grad


def inject_contour_query(step: int, trace_cont, current_Q: np.ndarray, gamma: float,
                         layer_id: str, window: Optional[Window] = None) -> np.ndarray:
    """Blend the contour image's cached query for (layer, step) into ``current_Q``."""
    if gamma == 0 or not in_window(step, window):
        return current_Q
    Q_cont = trace_cont.feature("Q", layer_id, step)
    return blend_query(Q_cont, current_Q, gamma)
