"""Checkpoints as flat named-tensor maps (safetensors: little-endian float32).

Tensor names follow the module tree, e.g. ``layers.0.sa.q.weight`` or
``layers.2.gsa.gate_alpha``. The denoiser config rides along in the file
metadata; the wiring mode is never stored.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .wiring import Denoiser, DenoiserConfig

FORMAT = "reground-denoiser/1"
META_KEY = "reground"


def save_checkpoint(net: Denoiser, path: Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: p.detach().to(torch.float32).contiguous().cpu() for name, p in net.named_parameters()}
    header = {"format": FORMAT, "config": net.config.to_dict(), "grounded": net.grounded, "extra": meta or {}}
    # one sorted-JSON entry: safetensors does not keep metadata key order, and
    # a single key keeps reruns byte-identical
    save_file(tensors, str(path), metadata={META_KEY: json.dumps(header, sort_keys=True)})
    return path


def read_metadata(path: Path) -> dict:
    with safe_open(str(path), framework="pt") as fh:
        raw = (fh.metadata() or {}).get(META_KEY)
    return json.loads(raw) if raw else {}


def read_tensors(path: Path) -> dict[str, np.ndarray]:
    with safe_open(str(path), framework="np") as fh:
        return {k: fh.get_tensor(k) for k in fh.keys()}


def load_checkpoint(path: Path, grounded: bool | None = None) -> Denoiser:
    """Rebuild the denoiser stored at ``path``.

    ``grounded=True`` on a base checkpoint returns a grounded net whose GSA
    modules keep their default initialisation (gate at zero).
    """
    meta = read_metadata(path)
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} checkpoint")
    config = DenoiserConfig.from_dict(meta["config"])
    stored_grounded = bool(meta["grounded"])
    net = Denoiser(config, grounded=stored_grounded if grounded is None else grounded)
    state = {k: torch.from_numpy(v.copy()) for k, v in read_tensors(path).items()}
    strict = grounded is None or grounded == stored_grounded
    net.load_state_dict(state, strict=strict)
    return net
