"""Seed derivation and small numeric helpers shared across the package.

Every random stream in the package is derived from one root seed through
:func:`derive_seed`.  Streams are keyed by string labels instead of draw
order, so adding a new consumer (another scenario, another training mode)
never shifts the randomness of existing ones.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np
import torch


def derive_seed(root_seed: int, *labels: object) -> int:
    """Map (root seed, label path) to a stable 63-bit stream seed.

    Uses SHA-256 over the JSON-encoded label path, so the derivation is
    stable across processes and Python versions (unlike ``hash()``).
    """
    payload = json.dumps([int(root_seed)] + [str(x) for x in labels])
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_from(root_seed: int, *labels: object) -> np.random.Generator:
    """Spawn an independent numpy generator for the given label path."""
    return np.random.default_rng(derive_seed(root_seed, *labels))


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed) & (2**63 - 1))
    return gen


def resize_bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a 2D float array with bilinear interpolation.

    Shared by augmentation and the attack compositors so that a patch
    optimized under this resampling is applied with the exact same one.
    """
    if values.shape == (height, width):
        return values.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
    out = torch.nn.functional.interpolate(
        t.unsqueeze(0).unsqueeze(0),
        size=(int(height), int(width)),
        mode="bilinear",
        align_corners=False,
    )
    return out.squeeze(0).squeeze(0).clamp_(0.0, 1.0).numpy()
