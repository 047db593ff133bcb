"""Small synthetic content images and reference sketches for the toy backends.

Every fixture is a uint8 RGB array so it survives a PNG round trip bit-exactly;
the toy captioner recognises fixtures by a hash of those bytes.
"""
from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

SIZE = 64

CAPTIONS = {
    "dog": "a sketch of a dog",
    "cat": "a sketch of a cat",
    "house": "a sketch of a house on grass",
}


def _grid(size=SIZE):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy / (size - 1), xx / (size - 1)


def _to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _dog():
    y, x = _grid()
    img = np.empty((SIZE, SIZE, 3))
    img[:] = (0.85, 0.9, 0.95)
    img[y > 0.8] = (0.35, 0.6, 0.3)
    body = ((x - 0.45) / 0.28) ** 2 + ((y - 0.6) / 0.16) ** 2 < 1
    head = ((x - 0.72) ** 2 + (y - 0.4) ** 2) < 0.13 ** 2
    fur = 0.08 * np.sin(40 * x + 13 * y)
    img[body | head] = 0
    img[body | head, 0] += 0.55 + fur[body | head]
    img[body | head, 1] += 0.38 + fur[body | head]
    img[body | head, 2] += 0.22
    eye = ((x - 0.76) ** 2 + (y - 0.37) ** 2) < 0.02 ** 2
    img[eye] = 0.05
    return img


def _cat():
    y, x = _grid()
    img = np.empty((SIZE, SIZE, 3))
    img[:] = (0.95, 0.92, 0.85)
    body = ((x - 0.5) / 0.22) ** 2 + ((y - 0.65) / 0.25) ** 2 < 1
    head = ((x - 0.5) ** 2 + (y - 0.3) ** 2) < 0.15 ** 2
    ear_l = (y > 0.1) & (y < 0.22) & (np.abs(x - 0.4) < (y - 0.1) * 0.7)
    ear_r = (y > 0.1) & (y < 0.22) & (np.abs(x - 0.6) < (y - 0.1) * 0.7)
    cat = body | head | ear_l | ear_r
    stripes = 0.15 * (np.sin(60 * y) > 0)
    img[cat] = np.stack([0.3 + stripes[cat], 0.3 + stripes[cat], 0.32 + stripes[cat]], axis=-1)
    return img


def _house():
    y, x = _grid()
    img = np.empty((SIZE, SIZE, 3))
    img[:] = (0.6, 0.78, 0.95)
    img[y > 0.78] = (0.3, 0.55, 0.25)
    walls = (x > 0.25) & (x < 0.75) & (y > 0.45) & (y <= 0.78)
    roof = (y > 0.2) & (y <= 0.45) & (np.abs(x - 0.5) < (y - 0.2) * 1.0)
    door = (x > 0.45) & (x < 0.55) & (y > 0.6) & (y <= 0.78)
    img[walls] = (0.8, 0.7, 0.55)
    img[roof] = (0.55, 0.15, 0.1)
    img[door] = (0.25, 0.15, 0.1)
    return img


def _hatch():
    y, x = _grid()
    img = np.ones((SIZE, SIZE, 3))
    lines = np.mod((x + y) * SIZE, 6) < 1.5
    img[lines] = 0.1
    return img


def _dots():
    rng = np.random.default_rng(7)
    img = np.ones((SIZE, SIZE, 3))
    pts = rng.integers(0, SIZE, size=(300, 2))
    img[pts[:, 0], pts[:, 1]] = 0.0
    return img


def _thick():
    y, x = _grid()
    img = np.ones((SIZE, SIZE, 3))
    r = np.hypot(x - 0.5, y - 0.5)
    img[np.abs(r - 0.3) < 0.05] = 0.0
    img[np.abs(x - 0.5) < 0.04] = 0.0
    return img


def _ink():
    y, x = _grid()
    img = np.ones((SIZE, SIZE, 3))
    wave = np.abs(y - 0.5 - 0.2 * np.sin(12 * x)) < 0.03
    img[wave] = (0.7, 0.1, 0.15)
    wave2 = np.abs(y - 0.25 - 0.1 * np.cos(9 * x)) < 0.02
    img[wave2] = (0.1, 0.2, 0.7)
    return img


def _blank():
    return np.ones((SIZE, SIZE, 3))


_BUILDERS = {
    "dog": _dog, "cat": _cat, "house": _house,
    "hatch": _hatch, "dots": _dots, "thick": _thick, "ink": _ink, "blank": _blank,
}
CONTENT_FIXTURES = ("dog", "cat", "house")
REFERENCE_FIXTURES = ("hatch", "dots", "thick", "ink", "blank")
ALL_FIXTURES = CONTENT_FIXTURES + REFERENCE_FIXTURES


@lru_cache(maxsize=None)
def _fixture_bytes(name):
    return _to_uint8(_BUILDERS[name]())


def fixture_uint8(name: str) -> np.ndarray:
    """The named fixture as a fresh (H, W, 3) uint8 array."""
    if name not in _BUILDERS:
        raise KeyError(f"unknown fixture {name!r}")
    return _fixture_bytes(name).copy()


def fixture(name: str) -> np.ndarray:
    """The named fixture as float RGB in [0, 1]."""
    return fixture_uint8(name).astype(np.float64) / 255.0


def fingerprint(image: np.ndarray) -> str:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = _to_uint8(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return hashlib.sha256(arr.tobytes() + repr(arr.shape).encode()).hexdigest()


@lru_cache(maxsize=1)
def fixture_index():
    return {fingerprint(_fixture_bytes(n)): n for n in _BUILDERS}


def identify(image: np.ndarray):
    """Fixture name for an image, or None when it is not a fixture."""
    return fixture_index().get(fingerprint(image))
