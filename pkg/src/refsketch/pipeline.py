"""End-to-end reference-guided sketch generation.

Stages, in order: contour extraction, three inversions with feature caching,
foreground segmentation, guided denoising, decode.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from . import dam
from .attention import (AttentionFeatures, AttentionMap, enhance_contrast, gate_kv_by_mask,
                        mix_kv, scaled_attention)
from .backends import Backends, load_backends
from .backends.toy import as_rgb
from .errors import DomainError, NumericError, SketchError, StageError
from .inversion import (InversionTrace, SamplerSchedule, cache_attention_features, ddpm_invert)
from .sdpe import DenoiseContext, dual_pass_step
from .spm import (apply_semantic_guidance, in_window, inject_contour_query, semantic_gradient)

log = logging.getLogger(__name__)

MODULES = ("DAM", "SPM", "SDPE", "CSA")


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the generator. Step windows are inclusive, 1-based."""

    alpha: float = 0.5
    gamma: float = 0.25
    zeta: float = 1.67
    beta_sg: float = 5.0
    beta_text: float = 0.1
    lambda_sem: float = 0.1
    delta: float = 1e-5
    tau: float = 0.35
    k_clusters: int = 5
    total_steps: int = 100
    skip_steps: int = 30
    injection_windows: Mapping[int, Tuple[int, int]] = field(
        default_factory=lambda: {32: (10, 70), 64: (10, 90)})
    guidance_window: Tuple[int, int] = (20, 100)
    semantic_window: Tuple[int, int] = (20, 100)
    seed: int = 42
    use_csa: bool = True
    use_dam: bool = True
    use_contour_mask: bool = True
    guidance_probes: int = 4
    backend: str = "toy"
    latent_size: int = 16

    def __post_init__(self):
        wins = {int(k): (int(v[0]), int(v[1])) for k, v in dict(self.injection_windows).items()}
        object.__setattr__(self, "injection_windows", wins)
        object.__setattr__(self, "guidance_window", tuple(int(x) for x in self.guidance_window))
        object.__setattr__(self, "semantic_window", tuple(int(x) for x in self.semantic_window))
        self.validate()

    def validate(self):
        T = self.total_steps
        if T < 1:
            raise DomainError(f"total_steps must be positive, got {T}")
        if not 0 <= self.skip_steps < T:
            raise DomainError(f"skip_steps must lie in [0, {T}), got {self.skip_steps}")
        named = [(f"injection_windows[{r}]", w) for r, w in self.injection_windows.items()]
        named += [("guidance_window", self.guidance_window),
                  ("semantic_window", self.semantic_window)]
        for name, (lo, hi) in named:
            if not 1 <= lo <= hi <= T:
                raise DomainError(f"{name}=({lo}, {hi}) must lie within [1, {T}]")
        if not 0 <= self.gamma <= 1:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.zeta > 0:
            raise DomainError(f"zeta must be positive, got {self.zeta}")
        if not 0 < self.tau < 1:
            raise DomainError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.delta > 0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if self.lambda_sem < 0:
            raise DomainError(f"lambda_sem must be non-negative, got {self.lambda_sem}")
        if self.k_clusters < 2:
            raise DomainError(f"k_clusters must be at least 2, got {self.k_clusters}")
        for name in ("alpha", "beta_sg", "beta_text"):
            if not np.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["injection_windows"] = {str(k): list(v) for k, v in sorted(self.injection_windows.items())}
        d["guidance_window"] = list(self.guidance_window)
        d["semantic_window"] = list(self.semantic_window)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_steps(self, total_steps: int) -> "PipelineConfig":
        """Same schedule shape at a different step count: skip and windows scale along."""
        T0 = self.total_steps
        if total_steps < 1:
            raise DomainError(f"total_steps must be positive, got {total_steps}")

        def win(w):
            lo = min(total_steps, max(1, round(w[0] * total_steps / T0)))
            return (lo, min(total_steps, max(lo, round(w[1] * total_steps / T0))))

        return self.replace(
            total_steps=total_steps,
            skip_steps=min(total_steps - 1, self.skip_steps * total_steps // T0),
            injection_windows={r: win(w) for r, w in self.injection_windows.items()},
            guidance_window=win(self.guidance_window),
            semantic_window=win(self.semantic_window))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESETS = {
    "table": PipelineConfig(),
    # 50-step variant with every window halved
    "text": PipelineConfig(total_steps=50, skip_steps=15,
                           injection_windows={32: (5, 35), 64: (5, 45)},
                           guidance_window=(10, 50), semantic_window=(10, 50)),
}


def ablate(config: PipelineConfig, disable: Iterable[str]) -> PipelineConfig:
    """Neutralise the named modules and return the new config."""
    disable = {m.upper() for m in disable}
    unknown = disable - set(MODULES)
    if unknown:
        raise DomainError(f"unknown modules {sorted(unknown)}; choose from {MODULES}")
    changes: Dict[str, Any] = {}
    if "DAM" in disable:
        changes["use_dam"] = False
    if "SPM" in disable:
        changes.update(gamma=0.0, lambda_sem=0.0)
    if "SDPE" in disable:
        changes.update(zeta=1.0, beta_sg=0.0, beta_text=0.0)
    if "CSA" in disable:
        changes["use_csa"] = False
    return config.replace(**changes) if changes else config


def neutralized(config: PipelineConfig) -> PipelineConfig:
    """Config with every intervention switched off."""
    return ablate(config, MODULES).replace(alpha=0.0)


@dataclass(frozen=True)
class ImageBundle:
    I_cnt: np.ndarray
    I_ref: np.ndarray
    I_cont: np.ndarray
    T_cnt: str
    z_ske_T: np.ndarray


@dataclass
class SketchResult:
    image: np.ndarray  # uint8 (H, W, 3)
    latent: np.ndarray
    config: PipelineConfig
    foreground_mask: dam.ForegroundMask
    trace_meta: Dict[str, Any]
    caption: str = ""
    counters: Dict[str, Any] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def metadata(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "caption": self.caption,
            "mask_coverage": self.foreground_mask.coverage,
            "timings": self.trace_meta.get("timings", {}),
            "step_times": self.trace_meta.get("step_times", []),
            "warnings": list(self.warnings),
        }


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def _windowed_steps(window, first, last):
    lo, hi = window
    return frozenset(range(max(lo, first), min(hi, last) + 1))


class CrossImageAttention:
    """Hook factory that turns self-attention layers into cross-image attention.

    For a hooked (layer, step): the content image's cached query is blended
    with the contour query; keys/values are the reference ones mixed with the
    current pass's own, kept only at foreground positions; background query
    rows attend to the pass's own keys/values. The attention map is
    contrast-enhanced before it is applied.
    """

    def __init__(self, config: PipelineConfig, content: InversionTrace, reference: InversionTrace,
                 contour: InversionTrace, layer_steps: Mapping[str, FrozenSet[int]],
                 masks: Mapping[str, dam.ForegroundMask]):
        self.config = config
        self.content = content
        self.reference = reference
        self.contour = contour
        self.layer_steps = dict(layer_steps)
        self.masks = {k: m.grid.reshape(-1).astype(bool) for k, m in masks.items()}
        self.interventions: Counter = Counter()

    def __call__(self, step: int):
        return {layer: self._hook(layer, step)
                for layer, steps in self.layer_steps.items() if step in steps}

    def _hook(self, layer: str, step: int):
        cfg = self.config
        fg = self.masks[layer]

        def hook(feat: AttentionFeatures):
            K_own, V_own = feat.K, feat.V
            Q = self.content.feature("Q", layer, step)
            Q = inject_contour_query(step, self.contour, Q, cfg.gamma, layer)
            if cfg.use_csa:
                K_ske, V_ske = mix_kv(self.reference.feature("K", layer, step),
                                      self.reference.feature("V", layer, step),
                                      K_own, V_own, cfg.alpha)
                K, V = gate_kv_by_mask(K_ske, V_ske, K_own, V_own, fg)
            else:
                K, V = K_own, V_own
            attn = enhance_contrast(scaled_attention(feat.replace(Q=Q, K=K, V=V)), cfg.zeta)
            phi = attn.phi
            if cfg.use_csa and not fg.all():
                own = enhance_contrast(scaled_attention(feat.replace(Q=Q)), cfg.zeta)
                phi = np.where(fg[:, None], attn.phi, own.phi)
            self.interventions[(layer, step)] += 1
            return AttentionMap(A=attn.A, phi=phi)

        return hook


def _stage(name):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            self.elapsed = time.perf_counter() - self.t0
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False
    return _Ctx()


def extract_contour(image: np.ndarray, backends: Backends, use_mask: bool = True) -> np.ndarray:
    """Contour drawing of ``image``: dark strokes on a light RGB ground."""
    edges = np.asarray(backends.edge.detect(image), dtype=np.float64)
    if use_mask:
        edges = edges * np.asarray(backends.mask.salient_mask(image), dtype=np.float64)
    return np.repeat((1.0 - edges)[..., None], 3, axis=-1)


def generate_sketch(I_cnt: np.ndarray, I_ref: np.ndarray, config: Optional[PipelineConfig] = None,
                    backends: Optional[Backends] = None,
                    mask_override: Optional[dam.ForegroundMask] = None) -> SketchResult:
    """Render the content image with the reference sketch's strokes."""
    config = config or PipelineConfig()
    backends = backends or load_backends(config.backend, latent_size=config.latent_size)
    diff = backends.diffusion
    caps = diff.capabilities
    timings: Dict[str, float] = {}
    notes: List[str] = []

    with _stage("contour") as st:
        I_cnt = as_rgb(I_cnt)
        I_ref = as_rgb(I_ref)
        I_cont = extract_contour(I_cnt, backends, config.use_contour_mask)
        if float(np.ptp(I_ref)) < 1e-6:
            msg = "reference image is blank; its keys/values carry no stroke texture"
            log.warning(msg)
            notes.append(msg)
    timings["contour"] = st.elapsed

    T, skip = config.total_steps, config.skip_steps
    with _stage("inversion") as st:
        schedule = SamplerSchedule.create(T, skip)
        caption = backends.caption.caption(I_cnt)
        layer_steps: Dict[str, FrozenSet[int]] = {}
        for nominal, window in config.injection_windows.items():
            spec = caps.self_layer_at(nominal)
            if spec is None:
                log.info("backend has no self-attention layer for resolution %s", nominal)
                continue
            steps = _windowed_steps(window, skip + 1, T) & _windowed_steps(config.guidance_window, 1, T)
            if steps:
                layer_steps[spec.layer_id] = steps
        content = cache_attention_features(
            ddpm_invert(diff.encode(I_cnt), schedule, diff, caption, config.seed, "content",
                        capture=layer_steps, capture_kinds=("Q",)), {"content"})
        reference = cache_attention_features(
            ddpm_invert(diff.encode(I_ref), schedule, diff, "", config.seed + 1, "reference",
                        capture=layer_steps, capture_kinds=("K", "V")), {"reference"})
        contour = cache_attention_features(
            ddpm_invert(diff.encode(I_cont), schedule, diff, "", config.seed + 2, "contour",
                        capture=layer_steps, capture_kinds=("Q",)), {"contour"})
        bundle = ImageBundle(I_cnt=I_cnt, I_ref=I_ref, I_cont=I_cont, T_cnt=caption,
                             z_ske_T=np.array(content.z_T))
    timings["inversion"] = st.elapsed

    with _stage("segmentation") as st:
        work = caps.self_layer_at(32) or caps.layers_of("self")[0]
        if mask_override is not None:
            mask = mask_override
        elif config.use_dam:
            mask = foreground_from_trace(content, diff, config, bundle.T_cnt)
        else:
            mask = dam.ForegroundMask.full(work.resolution)
        layer_masks = {layer: mask.resample(caps.layer(layer).resolution) for layer in layer_steps}
    timings["segmentation"] = st.elapsed

    with _stage("denoise") as st:
        csa = CrossImageAttention(config, content, reference, contour, layer_steps, layer_masks)
        ctx = DenoiseContext(schedule=schedule, step_noise=content.per_step_noise, cross_hooks=csa,
                             caption=bundle.T_cnt, beta_sg=config.beta_sg,
                             beta_text=config.beta_text, guidance_window=config.guidance_window)
        # the first `skip` steps would replay the content trajectory exactly
        z = np.array(content.latents[skip])
        guided_steps, semantic_steps, step_times = [], [], []
        for step in range(skip + 1, T + 1):
            t0 = time.perf_counter()
            z, pred = dual_pass_step(z, step, ctx, diff)
            if pred.guided:
                guided_steps.append(step)
            if config.lambda_sem > 0 and in_window(step, config.semantic_window):
                grad = semantic_gradient(z, diff.decode, bundle.T_cnt, backends.score,
                                         probes=config.guidance_probes, seed=(config.seed, step))
                z = apply_semantic_guidance(z, grad, config.lambda_sem, step,
                                            config.semantic_window)
                semantic_steps.append(step)
            if not np.isfinite(z).all():
                raise NumericError(f"non-finite latent at step {step}", step=step)
            step_times.append(time.perf_counter() - t0)
    timings["denoise"] = st.elapsed

    with _stage("decode") as st:
        image = to_uint8(diff.decode(z, size=I_cnt.shape[:2]))
    timings["decode"] = st.elapsed

    counters = {
        "interventions": dict(csa.interventions),
        "guided_steps": guided_steps,
        "semantic_steps": semantic_steps,
    }
    return SketchResult(image=image, latent=z, config=config, foreground_mask=mask,
                        trace_meta={"timings": timings, "step_times": step_times,
                                    "config_hash": config.config_hash(), "seed": config.seed},
                        caption=bundle.T_cnt, counters=counters, warnings=notes)


def foreground_from_trace(content: InversionTrace, backend, config: PipelineConfig,
                          caption: str) -> dam.ForegroundMask:
    """Segment the content image and keep clusters relevant to caption nouns."""
    caps = backend.capabilities
    self_spec = caps.self_layer_at(32) or caps.layers_of("self")[0]
    cross_spec = caps.cross_layer_at(self_spec.nominal_resolution) or caps.layers_of("cross")[0]
    T = config.total_steps
    window = config.injection_windows.get(self_spec.nominal_resolution, (1, T))
    steps = _windowed_steps(window, 1, T)
    latents = {s: content.latents[s - 1] for s in steps}
    self_maps, cross = dam.collect_attention_maps(latents, content.schedule, backend,
                                                  self_spec.layer_id, cross_spec.layer_id, caption)
    nouns = dam.object_nouns(dam.extract_nouns(caption))
    noun_maps = dam.noun_maps_from_cross(cross, backend.tokenize(caption), nouns)
    if not noun_maps:
        return dam.ForegroundMask.full(self_spec.resolution)
    F_SA = dam.aggregate_self_attention(self_maps)
    state = dam.segment(F_SA, noun_maps, config.k_clusters, config.seed, config.delta)
    return dam.select_foreground(state, config.tau)


def content_reconstruction(I_cnt: np.ndarray, config: PipelineConfig,
                           backends: Backends) -> np.ndarray:
    """Decoded content latent, the image a fully neutralised run reproduces."""
    diff = backends.diffusion
    I_cnt = as_rgb(I_cnt)
    return to_uint8(diff.decode(diff.encode(I_cnt), size=I_cnt.shape[:2]))
