"""Deterministic stand-ins for every backend.

The toy denoiser is a tiny two-resolution attention network with fixed seeded
weights: a low-resolution self-attention and cross-attention pair (standing in
for the 32x32 blocks of a full model) and a full-resolution self-attention
(standing in for 64x64). It is not trained; it only has to exercise every hook
kind while being a pure function of its inputs.
"""
from __future__ import annotations

import hashlib
import re
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .. import fixtures
from ..attention import AttentionFeatures, AttentionMap, scaled_attention
from ..errors import CapabilityError, DomainError, ShapeError
from .base import AttentionHook, BackendCapabilities, LayerSpec

_WORD = re.compile(r"[a-z0-9]+")
NULL_TOKEN = "<null>"


def _seed_for(*parts) -> int:
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def hash_embedding(word: str, dim: int, salt: str = "text") -> np.ndarray:
    """Unit-variance Gaussian vector seeded by a hash of ``word``."""
    return np.random.default_rng(_seed_for(salt, word)).standard_normal(dim)


def resize_channels(arr: np.ndarray, size: Tuple[int, int], resample=Image.BOX) -> np.ndarray:
    """Resize an (H, W, C) float array channel by channel. ``size`` is (H, W)."""
    if arr.shape[:2] == tuple(size):
        return arr.astype(np.float64, copy=True)
    h, w = size
    chans = [np.asarray(Image.fromarray(arr[..., c].astype(np.float32), mode="F")
                        .resize((w, h), resample=resample), dtype=np.float64)
             for c in range(arr.shape[2])]
    return np.stack(chans, axis=-1)


def as_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    elif img.ndim == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=-1)
    elif img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W), (H, W, 1) or (H, W, 3) image, got {np.shape(image)}")
    return img.astype(np.float64, copy=False)


def luminance(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    img = img / 255.0 if img.dtype == np.uint8 else img.astype(np.float64, copy=False)
    if img.ndim == 3:
        img = img[..., :3].mean(axis=-1)
    return img


def _timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


class ToyDiffusionBackend:
    """Seeded attention denoiser over a (channels, size, size) latent."""

    def __init__(self, latent_size: int = 16, channels: int = 4, dim: int = 16, seed: int = 0):
        if latent_size % 2:
            raise DomainError("latent_size must be even")
        self.latent_size = latent_size
        self.channels = channels
        self.dim = dim
        self.seed = seed
        lo = latent_size // 2
        self.capabilities = BackendCapabilities(
            latent_shape=(channels, latent_size, latent_size),
            attention_layers=(
                LayerSpec("self_lo", lo, "self", 32),
                LayerSpec("cross_lo", lo, "cross", 32),
                LayerSpec("self_hi", latent_size, "self", 64),
            ),
            supports_differentiable_decode=False,
            model_name=f"toy-{latent_size}-s{seed}",
        )
        rng = np.random.default_rng(seed)
        D = dim
        s = 1.0 / np.sqrt(D)

        def w(*shape, scale=s):
            return rng.standard_normal(shape) * scale

        self._w_in = w(channels, D, scale=1.0)
        self._pos = w(latent_size * latent_size, D, scale=0.5)
        self._w_time = w(D, D, scale=0.3 * s)
        self._proj = {
            "self_lo": (w(D, D), w(D, D), w(D, D), w(D, D)),
            "cross_lo": (w(D, D), w(D, D), w(D, D), w(D, D)),
            "self_hi": (w(D, D), w(D, D), w(D, D), w(D, D)),
        }
        self._w_out = w(D, channels, scale=0.7 * s)
        # Linear "VAE": latent channels are a fixed full-rank mix of centred RGB.
        self._enc = np.random.default_rng(seed + 1).standard_normal((channels, 3)) * 2.0
        self._dec = np.linalg.pinv(self._enc)
        betas = np.linspace(0.00085 ** 0.5, 0.012 ** 0.5, 1000) ** 2
        self._alphas_cumprod = np.cumprod(1.0 - betas)
        self._layer_ids = {spec.layer_id for spec in self.capabilities.attention_layers}

    # -- text -------------------------------------------------------------
    def tokenize(self, text: str) -> Sequence[str]:
        return [NULL_TOKEN] + _WORD.findall(text.lower())

    def _text_tokens(self, text: str) -> np.ndarray:
        return np.stack([hash_embedding(tok, self.dim) for tok in self.tokenize(text)])

    # -- vae --------------------------------------------------------------
    def encode(self, image: np.ndarray) -> np.ndarray:
        img = as_rgb(image)
        if img.size == 0:
            raise DomainError("cannot encode an empty image")
        small = resize_channels(img, (self.latent_size, self.latent_size))
        return np.einsum("cj,hwj->chw", self._enc, 2.0 * small - 1.0)

    def decode(self, latent: np.ndarray, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
        self._check_latent(latent)
        rgb = np.einsum("jc,chw->hwj", self._dec, latent) * 0.5 + 0.5
        if size is not None:
            rgb = resize_channels(rgb, size, resample=Image.BILINEAR)
        return np.clip(rgb, 0.0, 1.0)

    def _check_latent(self, z):
        if np.shape(z) != self.capabilities.latent_shape:
            raise ShapeError(f"latent shape {np.shape(z)} does not match "
                             f"{self.capabilities.latent_shape}")

    # -- denoiser ---------------------------------------------------------
    def _attend(self, layer_id, x, ctx, t, hooks):
        wq, wk, wv, wo = self._proj[layer_id]
        spec = self.capabilities.layer(layer_id)
        feat = AttentionFeatures(Q=x @ wq, K=ctx @ wk, V=ctx @ wv, layer_id=layer_id,
                                 resolution=spec.resolution, timestep=int(t))
        hook = hooks.get(layer_id)
        out = hook(feat) if hook is not None else None
        if out is None:
            phi = scaled_attention(feat).phi
        elif isinstance(out, AttentionMap):
            phi = out.phi
        elif isinstance(out, AttentionFeatures):
            phi = scaled_attention(out).phi
        else:
            raise CapabilityError(f"hook on {layer_id!r} returned unsupported {type(out).__name__}")
        if phi.shape != (x.shape[0], self.dim):
            raise ShapeError(f"hook on {layer_id!r} produced output of shape {phi.shape}")
        return phi @ wo

    def predict_noise(self, z_t: np.ndarray, t: int, text_condition: str = "",
                      attention_hooks: Optional[Mapping[str, AttentionHook]] = None) -> np.ndarray:
        self._check_latent(z_t)
        hooks = dict(attention_hooks or {})
        unknown = set(hooks) - self._layer_ids
        if unknown:
            raise CapabilityError(f"hooks reference undeclared layers: {sorted(unknown)}")
        C, H, W = z_t.shape
        lo = H // 2
        tokens = z_t.reshape(C, H * W).T
        h = tokens @ self._w_in + self._pos + _timestep_embedding(t, self.dim) @ self._w_time

        grid = h.reshape(H, W, self.dim)
        low = grid.reshape(lo, 2, lo, 2, self.dim).mean(axis=(1, 3)).reshape(lo * lo, self.dim)
        low = low + self._attend("self_lo", low, low, t, hooks)
        low = low + self._attend("cross_lo", low, self._text_tokens(text_condition), t, hooks)
        up = np.repeat(np.repeat(low.reshape(lo, lo, self.dim), 2, axis=0), 2, axis=1)
        h = h + up.reshape(H * W, self.dim)
        h = h + self._attend("self_hi", h, h, t, hooks)

        # Noise estimate that is optimal for unit-Gaussian latents, perturbed by
        # the attention network so every hook changes the output.
        a = self._alphas_cumprod[int(np.clip(t, 0, len(self._alphas_cumprod) - 1))]
        eps = np.sqrt(1.0 - a) * z_t + 0.1 * np.tanh(h @ self._w_out).T.reshape(C, H, W)
        return eps


class ToyEdgeDetector:
    """Forward-difference gradient magnitude thresholded at 0.2.

    Returns an edge response map: 1 on contour pixels, 0 elsewhere.
    """

    threshold = 0.2

    def detect(self, image: np.ndarray) -> np.ndarray:
        lum = luminance(np.asarray(image))
        if lum.size == 0:
            raise DomainError("cannot detect edges on an empty image")
        gx = np.zeros_like(lum)
        gy = np.zeros_like(lum)
        gx[:, :-1] = lum[:, 1:] - lum[:, :-1]
        gy[:-1, :] = lum[1:, :] - lum[:-1, :]
        return (np.hypot(gx, gy) > self.threshold).astype(np.float64)


class ToyCaptioner:
    """Fixed captions for the bundled fixtures, ``"an object"`` otherwise."""

    fallback = "an object"

    def __init__(self, captions: Optional[Mapping[str, str]] = None):
        self.captions = dict(fixtures.CAPTIONS if captions is None else captions)

    def caption_for(self, fixture_id: Optional[str]) -> str:
        return self.captions.get(fixture_id, self.fallback)

    def caption(self, image: np.ndarray) -> str:
        if np.size(image) == 0:
            from ..errors import BackendError
            raise BackendError("cannot caption an empty image")
        return self.caption_for(fixtures.identify(image))


def pooled_stats(image: np.ndarray) -> np.ndarray:
    """Eight summary statistics of an RGB image."""
    img = as_rgb(image)
    lum = img.mean(axis=-1)
    gx = np.abs(np.diff(lum, axis=1)).mean() if lum.shape[1] > 1 else 0.0
    gy = np.abs(np.diff(lum, axis=0)).mean() if lum.shape[0] > 1 else 0.0
    return np.concatenate([img.mean(axis=(0, 1)) - 0.5, img.std(axis=(0, 1)), [gx, gy]])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class ToyScorer:
    """Cosine between pooled image statistics and a hashed text embedding."""

    dim = 8

    def text_embedding(self, text: str) -> np.ndarray:
        return hash_embedding(text.strip().lower(), self.dim, salt="scorer")

    def similarity(self, image: np.ndarray, text: str) -> float:
        return cosine(pooled_stats(image), self.text_embedding(text))


class ToySaliencyMasker:
    """Binary mask where the 3x3 local luminance variance exceeds a threshold."""

    threshold = 1e-3

    def salient_mask(self, image: np.ndarray) -> np.ndarray:
        lum = luminance(np.asarray(image))
        if lum.size == 0:
            raise DomainError("cannot compute saliency of an empty image")
        mean = ndimage.uniform_filter(lum, size=3, mode="reflect")
        sq = ndimage.uniform_filter(lum * lum, size=3, mode="reflect")
        return (sq - mean * mean > self.threshold).astype(np.uint8)
