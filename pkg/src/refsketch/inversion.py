"""Edit-friendly DDPM inversion and attention-feature caching.

Every intermediate latent is drawn independently from the forward marginal of
the clean latent. The per-step noise maps are then solved from the sampler
update so that replaying the sampler from ``z_T`` walks exactly through those
latents back to ``z_0``.

Step indices count denoising iterations from 1 (at t = T) to T (ending at the
clean latent). ``trace.latents[i]`` is the latent *before* step ``i + 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Collection, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .attention import AttentionFeatures
from .errors import CapabilityError, DomainError, NumericError, ShapeError

ROLES = ("content", "reference", "contour")
ROLE_KINDS = {"content": ("Q",), "reference": ("K", "V"), "contour": ("Q",)}
KINDS = ("Q", "K", "V")


def _scaled_linear_alphas_cumprod(train_steps, beta_start, beta_end):
    betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, train_steps) ** 2
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class SamplerSchedule:
    """Noise levels of the T-step ancestral sampler.

    ``noise_levels[i]`` is sqrt(1 - alpha_bar) of the latent entering step
    ``i + 1``; ``final_noise_level`` belongs to the clean end of the chain and
    keeps the last step's variance nonzero.
    """

    total_steps: int
    skip_steps: int
    noise_levels: Tuple[float, ...]
    timesteps: Tuple[int, ...] = ()
    final_noise_level: float = 0.0

    def __post_init__(self):
        T = self.total_steps
        if T < 1:
            raise DomainError(f"total_steps must be at least 1, got {T}")
        if not 0 <= self.skip_steps < T:
            raise DomainError(f"skip_steps must satisfy 0 <= skip < {T}, got {self.skip_steps}")
        lv = np.asarray(self.noise_levels, dtype=np.float64)
        if lv.shape != (T,):
            raise DomainError(f"need {T} noise levels, got {lv.size}")
        if not ((lv > 0) & (lv <= 1)).all():
            raise DomainError("noise levels must lie in (0, 1]")
        if T > 1 and not (np.diff(lv) < 0).all():
            raise DomainError("noise levels must strictly decrease toward t=0")
        if not 0 < self.final_noise_level < lv[-1]:
            raise DomainError("final noise level must lie in (0, last noise level)")
        if not self.timesteps:
            object.__setattr__(self, "timesteps", tuple(range(T, 0, -1)))
        elif len(self.timesteps) != T:
            raise DomainError("need one model timestep per step")

    @classmethod
    def create(cls, total_steps: int, skip_steps: int = 0, train_steps: int = 1000,
               beta_start: float = 0.00085, beta_end: float = 0.012) -> "SamplerSchedule":
        """Evenly spaced subset of a scaled-linear training schedule."""
        if total_steps < 1:
            raise DomainError(f"total_steps must be at least 1, got {total_steps}")
        if total_steps > train_steps:
            raise DomainError("cannot take more steps than the training schedule has")
        ac = _scaled_linear_alphas_cumprod(train_steps, beta_start, beta_end)
        levels = np.arange(total_steps, 0, -1)
        ts = (levels * train_steps) // total_steps - 1
        return cls(
            total_steps=total_steps,
            skip_steps=skip_steps,
            noise_levels=tuple(float(np.sqrt(1.0 - ac[t])) for t in ts),
            timesteps=tuple(int(t) for t in ts),
            final_noise_level=float(np.sqrt(1.0 - ac[0])),
        )

    def alpha_bar_before(self, step: int) -> float:
        """alpha_bar of the latent entering ``step`` (1-based)."""
        return 1.0 - self.noise_levels[step - 1] ** 2

    def alpha_bar_after(self, step: int) -> float:
        lv = self.noise_levels[step] if step < self.total_steps else self.final_noise_level
        return 1.0 - lv ** 2

    def timestep(self, step: int) -> int:
        return self.timesteps[step - 1]

    def posterior(self, x: np.ndarray, eps: np.ndarray, step: int):
        """Mean and std of the ancestral (eta = 1) update for ``step``."""
        a = self.alpha_bar_before(step)
        ap = self.alpha_bar_after(step)
        x0 = (x - np.sqrt(1.0 - a) * eps) / np.sqrt(a)
        var = (1.0 - ap) / (1.0 - a) * (1.0 - a / ap)
        mu = np.sqrt(ap) * x0 + np.sqrt(1.0 - ap - var) * eps
        return mu, np.sqrt(var)

    def to_dict(self) -> dict:
        return {"total_steps": self.total_steps, "skip_steps": self.skip_steps,
                "noise_levels": list(self.noise_levels), "timesteps": list(self.timesteps),
                "final_noise_level": self.final_noise_level}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SamplerSchedule":
        return cls(total_steps=d["total_steps"], skip_steps=d["skip_steps"],
                   noise_levels=tuple(d["noise_levels"]), timesteps=tuple(d["timesteps"]),
                   final_noise_level=d["final_noise_level"])


def sampler_step(schedule: SamplerSchedule, x: np.ndarray, eps: np.ndarray, step: int,
                 noise: np.ndarray) -> np.ndarray:
    mu, sigma = schedule.posterior(x, eps, step)
    return mu + sigma * noise


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


FeatureKey = Tuple[str, str, int]  # (kind, layer_id, step)


@dataclass(frozen=True)
class InversionTrace:
    """Inverted latents, solved noise maps and cached attention features of one image."""

    latents: Tuple[np.ndarray, ...]
    per_step_noise: Tuple[np.ndarray, ...]
    schedule: SamplerSchedule
    source_role: str = "content"
    prompt: str = ""
    seed: int = 0
    cached_features: Mapping[FeatureKey, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        T = self.schedule.total_steps
        if len(self.latents) != T + 1:
            raise ShapeError(f"trace needs {T + 1} latents, got {len(self.latents)}")
        if len(self.per_step_noise) != T:
            raise ShapeError(f"trace needs {T} noise maps, got {len(self.per_step_noise)}")
        if self.source_role not in ROLES:
            raise DomainError(f"unknown source role {self.source_role!r}")
        object.__setattr__(self, "latents", tuple(_frozen(z) for z in self.latents))
        object.__setattr__(self, "per_step_noise", tuple(_frozen(n) for n in self.per_step_noise))
        object.__setattr__(self, "cached_features", MappingProxyType(
            {k: _frozen(v) for k, v in self.cached_features.items()}))

    @property
    def z_T(self) -> np.ndarray:
        return self.latents[0]

    @property
    def z_0(self) -> np.ndarray:
        return self.latents[-1]

    @property
    def latent_shape(self):
        return self.latents[0].shape

    def feature(self, kind: str, layer_id: str, step: int) -> np.ndarray:
        try:
            return self.cached_features[(kind, layer_id, step)]
        except KeyError:
            raise CapabilityError(f"{self.source_role} trace has no cached {kind} for "
                                  f"(layer={layer_id!r}, step={step})") from None

    def has_feature(self, kind: str, layer_id: str, step: int) -> bool:
        return (kind, layer_id, step) in self.cached_features

    def count(self, kind: str) -> int:
        return sum(1 for k in self.cached_features if k[0] == kind)


def ddpm_invert(z_0: np.ndarray, schedule: SamplerSchedule, backend, prompt: str = "",
                seed: int = 0, role: str = "content",
                capture: Optional[Mapping[str, Collection[int]]] = None,
                capture_kinds: Iterable[str] = KINDS) -> InversionTrace:
    """Invert ``z_0`` into a trace that replays back to it exactly.

    ``capture`` maps layer ids to the step indices whose Q/K/V should be
    recorded while the noise maps are solved.
    """
    z_0 = np.asarray(z_0, dtype=np.float64)
    if not np.isfinite(z_0).all():
        raise NumericError("input latent is not finite", step=0)
    T = schedule.total_steps
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((T,) + z_0.shape)
    # latents[i] enters step i+1 at noise level noise_levels[i]; latents[T] is clean.
    latents = [np.sqrt(1.0 - lv ** 2) * z_0 + lv * n
               for lv, n in zip(schedule.noise_levels, draws)]
    latents.append(z_0)

    kinds = tuple(capture_kinds)
    for layer in capture or {}:
        backend.capabilities.layer(layer)
    cached: Dict[FeatureKey, np.ndarray] = {}
    noise = []
    for step in range(1, T + 1):
        hooks = {}
        for layer, steps in (capture or {}).items():
            if step in steps:
                hooks[layer] = _recorder(cached, layer, step, kinds)
        x = latents[step - 1]
        eps = backend.predict_noise(x, schedule.timestep(step), prompt, hooks)
        mu, sigma = schedule.posterior(x, eps, step)
        n = (latents[step] - mu) / sigma
        if not np.isfinite(n).all():
            raise NumericError(f"non-finite noise map at step {step}", step=step)
        noise.append(n)
    return InversionTrace(latents=tuple(latents), per_step_noise=tuple(noise), schedule=schedule,
                          source_role=role, prompt=prompt, seed=seed, cached_features=cached)


def _recorder(store, layer, step, kinds):
    def hook(feat: AttentionFeatures):
        for kind in kinds:
            store[(kind, layer, step)] = getattr(feat, kind)
        return None
    return hook


def cache_attention_features(trace: InversionTrace, roles: Collection[str]) -> InversionTrace:
    """Keep only the feature kinds the trace's role contributes downstream.

    Content and contour traces keep queries; reference traces keep keys and
    values. A trace whose role is not in ``roles`` keeps nothing.
    """
    unknown = set(roles) - set(ROLES)
    if unknown:
        raise DomainError(f"unknown roles: {sorted(unknown)}")
    keep = ROLE_KINDS[trace.source_role] if trace.source_role in roles else ()
    cached = {k: v for k, v in trace.cached_features.items() if k[0] in keep}
    return replace(trace, cached_features=cached)


def replay_reconstruct(trace: InversionTrace, backend) -> np.ndarray:
    """Run the sampler from ``z_T`` with the trace's noise maps."""
    if tuple(trace.latent_shape) != tuple(backend.capabilities.latent_shape):
        raise ShapeError(f"trace latent shape {trace.latent_shape} does not match backend "
                         f"{backend.capabilities.latent_shape}")
    sched = trace.schedule
    x = np.array(trace.z_T)
    for step in range(1, sched.total_steps + 1):
        eps = backend.predict_noise(x, sched.timestep(step), trace.prompt)
        x = sampler_step(sched, x, eps, step, trace.per_step_noise[step - 1])
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite latent during replay at step {step}", step=step)
    return x


# -- on-disk cache ------------------------------------------------------------

def _write_f32(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, shape) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64).reshape(shape)


def save_trace(trace: InversionTrace, directory) -> Path:
    """Write ``meta.json`` plus one little-endian float32 file per tensor."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, z in enumerate(trace.latents):
        name = f"latent_z_{i}.f32"
        _write_f32(d / name, z)
        entries.append({"kind": "latent", "layer": "z", "t": i, "shape": list(z.shape), "file": name})
    for i, n in enumerate(trace.per_step_noise, start=1):
        name = f"noise_z_{i}.f32"
        _write_f32(d / name, n)
        entries.append({"kind": "noise", "layer": "z", "t": i, "shape": list(n.shape), "file": name})
    for (kind, layer, step), arr in sorted(trace.cached_features.items()):
        name = f"{kind}_{layer}_{step}.f32"
        _write_f32(d / name, arr)
        entries.append({"kind": kind, "layer": layer, "t": step, "shape": list(arr.shape),
                        "file": name})
    meta = {"schedule": trace.schedule.to_dict(), "shape": list(trace.latent_shape),
            "role": trace.source_role, "seed": trace.seed, "prompt": trace.prompt,
            "tensors": entries}
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    return d


def load_trace(directory) -> InversionTrace:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    latents, noise, cached = {}, {}, {}
    for e in meta["tensors"]:
        arr = _read_f32(d / e["file"], e["shape"])
        if e["kind"] == "latent":
            latents[e["t"]] = arr
        elif e["kind"] == "noise":
            noise[e["t"]] = arr
        else:
            cached[(e["kind"], e["layer"], e["t"])] = arr
    return InversionTrace(
        latents=tuple(latents[i] for i in sorted(latents)),
        per_step_noise=tuple(noise[i] for i in sorted(noise)),
        schedule=SamplerSchedule.from_dict(meta["schedule"]),
        source_role=meta["role"], prompt=meta["prompt"], seed=meta["seed"],
        cached_features=cached,
    )
