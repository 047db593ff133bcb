"""Model adapters: abstract interfaces, deterministic toys and the SD adapter."""
import os

from ..errors import CapabilityError
from .base import (AttentionHook, BackendCapabilities, Backends, CaptionBackend, DiffusionBackend,
                   EdgeBackend, LayerSpec, MaskBackend, ScoreBackend)
from .toy import (ToyCaptioner, ToyDiffusionBackend, ToyEdgeDetector, ToySaliencyMasker,
                  ToyScorer)

MODEL_DIR_ENV = "S2S_MODEL_DIR"


def load_backends(name="toy", **kwargs) -> Backends:
    """Build a backend set by name (``"toy"`` or ``"sd-adapter"``)."""
    if name == "toy":
        return Backends(
            diffusion=ToyDiffusionBackend(**kwargs),
            edge=ToyEdgeDetector(),
            caption=ToyCaptioner(),
            score=ToyScorer(),
            mask=ToySaliencyMasker(),
        )
    if name == "sd-adapter":
        from .sd_adapter import load_sd_backends
        return load_sd_backends(os.environ.get(MODEL_DIR_ENV), **kwargs)
    raise CapabilityError(f"unknown backend {name!r}; expected 'toy' or 'sd-adapter'")


__all__ = [
    "AttentionHook", "BackendCapabilities", "Backends", "CaptionBackend", "DiffusionBackend",
    "EdgeBackend", "LayerSpec", "MaskBackend", "ScoreBackend", "ToyCaptioner",
    "ToyDiffusionBackend", "ToyEdgeDetector", "ToySaliencyMasker", "ToyScorer",
    "load_backends", "MODEL_DIR_ENV",
]
