"""Foreground selection from clustered self-attention and caption-noun relevance."""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans

from .attention import scaled_attention
from .errors import DomainError, ShapeError

DEFAULT_DELTA = 1e-5
DEFAULT_TAU = 0.35


@dataclass(frozen=True)
class ForegroundMask:
    grid: np.ndarray
    resolution: int

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.shape != (self.resolution, self.resolution):
            raise ShapeError(f"mask grid {g.shape} does not match resolution {self.resolution}")
        if not np.isin(g, (0, 1)).all():
            raise DomainError("mask entries must be 0 or 1")
        g = g.astype(np.uint8)
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @classmethod
    def full(cls, resolution: int) -> "ForegroundMask":
        return cls(np.ones((resolution, resolution), np.uint8), resolution)

    @classmethod
    def empty(cls, resolution: int) -> "ForegroundMask":
        return cls(np.zeros((resolution, resolution), np.uint8), resolution)

    @property
    def coverage(self) -> float:
        return float(self.grid.mean())

    def resample(self, resolution: int) -> "ForegroundMask":
        """Nearest-neighbour resample to another square grid."""
        if resolution == self.resolution:
            return self
        idx = (np.arange(resolution) * self.resolution) // resolution
        return ForegroundMask(self.grid[np.ix_(idx, idx)], resolution)

    def to_pgm(self) -> bytes:
        r = self.resolution
        return f"P5\n{r} {r}\n255\n".encode() + (self.grid * 255).astype(np.uint8).tobytes()

    def save_pgm(self, path) -> Path:
        p = Path(path)
        p.write_bytes(self.to_pgm())
        return p


@dataclass(frozen=True)
class SegmentationState:
    F_SA: np.ndarray
    cluster_masks: Tuple[np.ndarray, ...]
    noun_maps: Mapping[str, np.ndarray]
    relevance: Mapping[Tuple[int, str], float] = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return self.cluster_masks[0].shape[0] if self.cluster_masks else 0


def aggregate_self_attention(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Entrywise mean of self-attention maps over heads and timesteps."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise DomainError("no attention maps to aggregate")
    shape = maps[0].shape
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise ShapeError(f"map {i} has shape {m.shape}, expected {shape}")
    return np.mean(maps, axis=0)


def _side(P: int) -> int:
    side = int(round(np.sqrt(P)))
    if side * side != P:
        raise ShapeError(f"{P} pixels do not form a square grid")
    return side


def cluster_attention(F_SA: np.ndarray, k: int, seed: int = 0) -> List[np.ndarray]:
    """KMeans over the rows of ``F_SA``; one binary (side, side) mask per cluster."""
    F = np.asarray(F_SA, dtype=np.float64)
    if F.ndim != 2:
        raise ShapeError(f"F_SA must be 2-D, got {F.shape}")
    P = F.shape[0]
    if k < 2:
        raise DomainError(f"need at least 2 clusters, got k={k}")
    if k > P:
        raise DomainError(f"k={k} exceeds the {P} available pixels")
    side = _side(P)
    with warnings.catch_warnings():
        # duplicate rows trigger a convergence warning; the labels are still valid
        warnings.simplefilter("ignore")
        labels = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(F)
    return [(labels == j).reshape(side, side).astype(np.uint8) for j in range(k)]


def relevance_score(M_j: np.ndarray, A_n: np.ndarray, delta: float = DEFAULT_DELTA) -> float:
    M_j, A_n = np.asarray(M_j, dtype=np.float64), np.asarray(A_n, dtype=np.float64)
    if M_j.shape != A_n.shape:
        raise ShapeError(f"mask {M_j.shape} and attention map {A_n.shape} differ")
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    return float((M_j * A_n).sum() / (M_j.sum() + delta))


def score_clusters(masks: Sequence[np.ndarray], noun_maps: Mapping[str, np.ndarray],
                   delta: float = DEFAULT_DELTA) -> Dict[Tuple[int, str], float]:
    return {(j, n): relevance_score(m, a, delta)
            for j, m in enumerate(masks) for n, a in noun_maps.items()}


def select_foreground(state: SegmentationState, tau: float = DEFAULT_TAU) -> ForegroundMask:
    """Union of clusters scoring strictly above ``tau`` for at least one noun."""
    if not state.cluster_masks:
        raise DomainError("segmentation has no clusters")
    res = state.resolution
    nouns = list(state.noun_maps)
    missing = [(j, n) for j in range(len(state.cluster_masks)) for n in nouns
               if (j, n) not in state.relevance]
    if missing:
        raise DomainError(f"relevance missing for {len(missing)} (cluster, noun) pairs")
    out = np.zeros((res, res), dtype=bool)
    for j, m in enumerate(state.cluster_masks):
        if any(state.relevance[(j, n)] > tau for n in nouns):
            out |= m.astype(bool)
    return ForegroundMask(out.astype(np.uint8), res)


def segment(F_SA: np.ndarray, noun_maps: Mapping[str, np.ndarray], k: int, seed: int = 0,
            delta: float = DEFAULT_DELTA) -> SegmentationState:
    masks = cluster_attention(F_SA, min(k, F_SA.shape[0]), seed)
    return SegmentationState(F_SA=F_SA, cluster_masks=tuple(masks), noun_maps=dict(noun_maps),
                             relevance=score_clusters(masks, noun_maps, delta))


# -- attention taps -------------------------------------------------------------

def collect_attention_maps(latents_by_step: Mapping[int, np.ndarray], schedule, backend,
                           self_layer: str, cross_layer: str, prompt: str):
    """Run the backend over ``latents_by_step`` and read attention maps.

    Returns the list of self-attention maps at ``self_layer`` and the mean
    cross-attention map (queries x text tokens) at ``cross_layer``.
    """
    self_maps, cross_maps = [], []

    def read_self(feat):
        self_maps.append(scaled_attention(feat).A)

    def read_cross(feat):
        cross_maps.append(scaled_attention(feat).A)

    hooks = {self_layer: read_self, cross_layer: read_cross}
    for step, z in sorted(latents_by_step.items()):
        backend.predict_noise(z, schedule.timestep(step), prompt, hooks)
    return self_maps, np.mean(cross_maps, axis=0)


def noun_maps_from_cross(cross: np.ndarray, tokens: Sequence[str],
                         nouns: Sequence[str]) -> Dict[str, np.ndarray]:
    """Per-noun spatial maps, min-max normalised to [0, 1].

    Nouns that never occur among ``tokens`` are skipped.
    """
    side = _side(cross.shape[0])
    out = {}
    for noun in nouns:
        cols = [i for i, tok in enumerate(tokens) if tok == noun]
        if not cols:
            continue
        a = cross[:, cols].mean(axis=1)
        lo, hi = a.min(), a.max()
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
        out[noun] = a.reshape(side, side)
    return out


# -- caption nouns ------------------------------------------------------------

_CLOSED_CLASS = frozenset("""
a an the this that these those some any each every no all both either neither
of on in at by for with without from to into onto over under above below behind
between among through during before after near beside besides against along
across around about up down off out upon within via per
and or but nor so yet if then than as while because although though
i me my mine you your yours he him his she her hers it its we us our ours
they them their theirs who whom whose which what where when why how
is are was were be been being am do does did has have had having
can could will would shall should may might must
there here very too also just not only
one two three four five six seven eight nine ten
""".split())

_DESCRIPTIVE = frozenset("""
red green blue yellow black white gray grey brown orange purple pink
big small large little tall short old young new
""".split())

# Words naming the rendering medium rather than anything depicted.
MEDIUM_WORDS = frozenset("""
sketch sketches drawing drawings photo photograph picture image painting illustration
render rendering lineart line art doodle portrait
""".split())

_TOKEN = re.compile(r"[a-z][a-z'-]*")


def object_nouns(nouns: Sequence[str]) -> List[str]:
    """Drop medium words, which describe the output style and not a region."""
    return [n for n in nouns if n not in MEDIUM_WORDS]


def extract_nouns(caption: str) -> List[str]:
    """Ordered, de-duplicated content words after closed-class removal."""
    seen, out = set(), []
    for tok in _TOKEN.findall(caption.lower()):
        tok = tok.strip("'-")
        if len(tok) < 2 or tok in _CLOSED_CLASS or tok in _DESCRIPTIVE:
            continue
        if tok not in seen:
            seen.add(tok)
            out.append(tok)
    return out
