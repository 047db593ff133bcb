"""Adapter interfaces for the models the pipeline drives.

Any object with the right methods satisfies these protocols; the classes here
exist for typing and for the capability record each diffusion backend
publishes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np

from ..attention import AttentionFeatures, AttentionMap

# A hook sees one layer's Q/K/V. Returning None keeps the default computation,
# returning features recomputes attention on them, returning a map uses its phi.
HookResult = Union[None, AttentionFeatures, AttentionMap]
AttentionHook = Callable[[AttentionFeatures], HookResult]


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    resolution: int
    kind: str  # "self" or "cross"
    nominal_resolution: int  # the full-size model resolution this layer stands in for

    @property
    def tokens(self) -> int:
        return self.resolution * self.resolution


@dataclass(frozen=True)
class BackendCapabilities:
    latent_shape: Tuple[int, int, int]
    attention_layers: Tuple[LayerSpec, ...]
    supports_differentiable_decode: bool
    model_name: str
    thread_safe: bool = True

    def layer(self, layer_id: str) -> LayerSpec:
        for spec in self.attention_layers:
            if spec.layer_id == layer_id:
                return spec
        from ..errors import CapabilityError
        raise CapabilityError(f"backend {self.model_name!r} has no attention layer {layer_id!r}")

    def layers_of(self, kind: str) -> Tuple[LayerSpec, ...]:
        return tuple(s for s in self.attention_layers if s.kind == kind)

    def self_layer_at(self, nominal: int) -> Optional[LayerSpec]:
        for s in self.attention_layers:
            if s.kind == "self" and s.nominal_resolution == nominal:
                return s
        return None

    def cross_layer_at(self, nominal: int) -> Optional[LayerSpec]:
        for s in self.attention_layers:
            if s.kind == "cross" and s.nominal_resolution == nominal:
                return s
        return None


@runtime_checkable
class DiffusionBackend(Protocol):
    capabilities: BackendCapabilities

    def predict_noise(self, z_t: np.ndarray, t: int, text_condition: str = "",
                      attention_hooks: Optional[Mapping[str, AttentionHook]] = None) -> np.ndarray: ...

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray, size: Optional[Tuple[int, int]] = None) -> np.ndarray: ...

    def tokenize(self, text: str) -> Sequence[str]: ...


class EdgeBackend(Protocol):
    def detect(self, image: np.ndarray) -> np.ndarray: ...


class CaptionBackend(Protocol):
    def caption(self, image: np.ndarray) -> str: ...


class ScoreBackend(Protocol):
    def similarity(self, image: np.ndarray, text: str) -> float: ...


class MaskBackend(Protocol):
    def salient_mask(self, image: np.ndarray) -> np.ndarray: ...


@dataclass
class Backends:
    """The full set of adapters one generation needs."""

    diffusion: DiffusionBackend
    edge: EdgeBackend
    caption: CaptionBackend
    score: ScoreBackend
    mask: MaskBackend
