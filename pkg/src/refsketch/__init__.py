"""Training-free reference-guided sketch generation on top of a diffusion backend."""
from .attention import (AttentionFeatures, AttentionMap, blend_query, enhance_contrast,
                        gate_kv_by_mask, mix_kv, scaled_attention)
from .backends import Backends, load_backends
from .dam import ForegroundMask, SegmentationState, relevance_score, select_foreground
from .errors import (BackendError, CapabilityError, DomainError, NumericError, ShapeError,
                     SketchError, StageError)
from .inversion import InversionTrace, SamplerSchedule, ddpm_invert, replay_reconstruct
from .pipeline import (PRESETS, PipelineConfig, SketchResult, ablate, generate_sketch,
                       neutralized)
from .sdpe import NoisePrediction, cfg_combine

__version__ = "0.1.0"
