"""Pluggable quality scorers and per-run metric reports.

The bundled scorers are cheap proxies. Learned metrics (FID, LPIPS, ArtFID)
plug in through :func:`register_scorer` with the same signature.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .backends.toy import ToyEdgeDetector, as_rgb, luminance, resize_channels

Scorer = Callable[[np.ndarray, np.ndarray, np.ndarray], float]
SCORERS: Dict[str, Scorer] = {}


def register_scorer(name: str):
    def deco(fn: Scorer) -> Scorer:
        if name in SCORERS:
            raise ValueError(f"scorer {name!r} already registered")
        SCORERS[name] = fn
        return fn
    return deco


def _match(image, like):
    img = as_rgb(image)
    target = as_rgb(like).shape[:2]
    return img if img.shape[:2] == target else resize_channels(img, target)


@register_scorer("content_distance")
def content_distance(sketch, content, reference) -> float:
    """Mean absolute pixel difference to the content image (lower is closer)."""
    return float(np.abs(as_rgb(sketch) - _match(content, sketch)).mean())


@register_scorer("edge_overlap")
def edge_overlap(sketch, content, reference) -> float:
    """Intersection over union of the edge maps of sketch and content."""
    det = ToyEdgeDetector()
    a = det.detect(sketch).astype(bool)
    b = det.detect(_match(content, sketch)).astype(bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


@register_scorer("style_distance")
def style_distance(sketch, content, reference, bins: int = 16) -> float:
    """L1 distance between the luminance histograms of sketch and reference."""
    ha, _ = np.histogram(luminance(as_rgb(sketch)), bins=bins, range=(0, 1))
    hb, _ = np.histogram(luminance(as_rgb(reference)), bins=bins, range=(0, 1))
    return float(np.abs(ha / ha.sum() - hb / hb.sum()).sum() / 2)


DEFAULT_SCORERS = ("content_distance", "edge_overlap", "style_distance")


def combined_score(scores: Mapping[str, float]) -> Optional[float]:
    """ArtFID-shaped aggregate (1 + content) * (1 + style); None if either is missing."""
    if "content_distance" in scores and "style_distance" in scores:
        return (1.0 + scores["content_distance"]) * (1.0 + scores["style_distance"])
    return None


@dataclass
class MetricReport:
    per_pair: List[Dict[str, float]] = field(default_factory=list)
    names: List[str] = field(default_factory=list)

    @property
    def aggregates(self) -> Dict[str, float]:
        return {n: float(np.mean([p[n] for p in self.per_pair])) for n in self.names
                if self.per_pair}

    @property
    def combined(self) -> Optional[float]:
        return combined_score(self.aggregates)

    def to_dict(self) -> dict:
        return {"per_pair": self.per_pair, "aggregates": self.aggregates,
                "combined": self.combined}


def score_pairs(triples: Sequence, scorers: Sequence[str] = DEFAULT_SCORERS,
                labels: Optional[Sequence[str]] = None) -> MetricReport:
    """Score (sketch, content, reference) triples with the named scorers."""
    missing = [s for s in scorers if s not in SCORERS]
    if missing:
        raise KeyError(f"unknown scorers: {missing}; available: {sorted(SCORERS)}")
    report = MetricReport(names=list(scorers))
    for i, (sketch, content, reference) in enumerate(triples):
        row = {name: SCORERS[name](sketch, content, reference) for name in scorers}
        if labels is not None:
            row["pair"] = labels[i]
        report.per_pair.append(row)
    return report
