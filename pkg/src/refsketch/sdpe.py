"""Two-pass guided denoising step with stroke and text guidance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Tuple

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .inversion import SamplerSchedule, sampler_step
from .spm import Window, in_window


@dataclass(frozen=True)
class NoisePrediction:
    eps_self: np.ndarray
    eps_stroke: np.ndarray
    eps_text: np.ndarray
    eps_combined: np.ndarray
    guided: bool = True

    def __post_init__(self):
        shape = self.eps_self.shape
        for name in ("eps_stroke", "eps_text", "eps_combined"):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} shape differs from eps_self {shape}")


def cfg_combine(eps_self, eps_stroke, eps_text, beta_sg: float, beta_text: float) -> np.ndarray:
    """eps_self + beta_sg (eps_stroke - eps_self) + beta_text (eps_text - eps_self).

    Scalars broadcast; arrays must share one shape.
    """
    eps_self, eps_stroke, eps_text = (np.asarray(e, dtype=np.float64)
                                      for e in (eps_self, eps_stroke, eps_text))
    shapes = {e.shape for e in (eps_self, eps_stroke, eps_text) if e.ndim}
    if len(shapes) > 1:
        raise ShapeError(f"noise prediction shapes differ: {sorted(shapes)}")
    if not (np.isfinite(beta_sg) and np.isfinite(beta_text)):
        raise DomainError("guidance scales must be finite")
    out = eps_self + np.zeros(next(iter(shapes), ()))
    if beta_sg:
        out = out + beta_sg * (eps_stroke - eps_self)
    if beta_text:
        out = out + beta_text * (eps_text - eps_self)
    return out


HookFactory = Callable[[int], Mapping[str, Callable]]


@dataclass
class DenoiseContext:
    """Everything one guided step needs besides the latent.

    ``cross_hooks(step)`` returns the attention hooks that turn the backend's
    self-attention into cross-image attention for that step.
    """

    schedule: SamplerSchedule
    step_noise: Tuple[np.ndarray, ...]
    cross_hooks: HookFactory
    caption: str
    stroke_prompt: str = ""
    beta_sg: float = 5.0
    beta_text: float = 0.1
    guidance_window: Optional[Window] = (20, 100)


def dual_pass_step(z_t: np.ndarray, step: int, ctx: DenoiseContext,
                   backend) -> Tuple[np.ndarray, NoisePrediction]:
    """Advance one sampler step from ``z_t``.

    The vanilla pass (caption-conditioned, no hooks) gives eps_self. Inside the
    guidance window the cross-image pass runs twice, without text for
    eps_stroke and with the caption for eps_text, and the three are combined.
    """
    if not np.isfinite(z_t).all():
        raise NumericError(f"non-finite latent entering step {step}", step=step)
    t = ctx.schedule.timestep(step)
    eps_self = backend.predict_noise(z_t, t, ctx.caption)
    guided = in_window(step, ctx.guidance_window) and (ctx.beta_sg != 0 or ctx.beta_text != 0)
    if guided:
        hooks = ctx.cross_hooks(step)
        eps_stroke = backend.predict_noise(z_t, t, ctx.stroke_prompt, hooks)
        eps_text = backend.predict_noise(z_t, t, ctx.caption, hooks)
        eps = cfg_combine(eps_self, eps_stroke, eps_text, ctx.beta_sg, ctx.beta_text)
    else:
        eps_stroke = eps_text = eps = eps_self
    pred = NoisePrediction(eps_self, eps_stroke, eps_text, eps, guided=guided)
    z_prev = sampler_step(ctx.schedule, z_t, eps, step, ctx.step_noise[step - 1])
    if not np.isfinite(z_prev).all():
        raise NumericError(f"non-finite latent after step {step}", step=step)
    return z_prev, pred
