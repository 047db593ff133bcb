"""Entry point for a pretrained latent-diffusion adapter.

Only the discovery logic ships here. The adapter needs ``diffusers`` and a
model directory named by ``S2S_MODEL_DIR``; if either is missing a
:class:`CapabilityError` explains what to install or set.
"""
from __future__ import annotations

import importlib.util
from pathlib import Path
from typing import Optional

from ..errors import CapabilityError

REQUIRED_FILES = ("model_index.json",)


def check_environment(model_dir: Optional[str]) -> Path:
    if importlib.util.find_spec("diffusers") is None:
        raise CapabilityError("the sd-adapter backend needs the 'diffusers' package")
    if not model_dir:
        raise CapabilityError("set S2S_MODEL_DIR to a diffusers model directory")
    path = Path(model_dir)
    missing = [f for f in REQUIRED_FILES if not (path / f).is_file()]
    if missing:
        raise CapabilityError(f"{path} is not a diffusers model directory (missing {missing})")
    return path


def load_sd_backends(model_dir: Optional[str], **kwargs):
    check_environment(model_dir)
    raise CapabilityError(
        "attention-hook wiring for pretrained UNets is not part of this build; "
        "use backend='toy' or provide a Backends instance directly")
