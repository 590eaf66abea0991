"""Random patch extraction with bicubic resampling back to full size.

The resampler is written as a pair of dense interpolation matrices so the
operator is a plain (differentiable) matrix product ``W @ crop @ W.T``.
Convention: Keys cubic kernel with ``a = -0.5``, half-pixel centres,
clamp-to-edge, no antialiasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

RHO_MIN = 0.7
RHO_MAX = 1.0
CUBIC_A = -0.5


@dataclass(frozen=True)
class PatchConfig:
    """Crop of side ``floor(rho * d)`` at row/column offset ``(j1, j2)``."""

    rho: float
    j1: int
    j2: int
    d: int

    def __post_init__(self):
        if not RHO_MIN <= self.rho <= RHO_MAX:
            raise ValueError(f"rho={self.rho} outside [{RHO_MIN}, {RHO_MAX}]")
        s = self.side
        if s < 1:
            raise ValueError(f"patch side floor({self.rho}*{self.d}) < 1")
        if self.j1 < 0 or self.j2 < 0 or self.j1 + s > self.d or self.j2 + s > self.d:
            raise ValueError(
                f"offsets ({self.j1}, {self.j2}) not admissible for side {s} in d={self.d}"
            )

    @property
    def side(self) -> int:
        return patch_side(self.rho, self.d)

    @classmethod
    def identity(cls, d: int) -> "PatchConfig":
        return cls(1.0, 0, 0, d)


def patch_side(rho: float, d: int) -> int:
    # small tolerance so that e.g. rho=0.75, d=4 gives 3 and not 2 through rounding
    return int(math.floor(rho * d + 1e-9))


def sample_patch_config(rng: np.random.Generator, d: int) -> PatchConfig:
    """Draw ``rho ~ U[0.7, 1]`` and offsets uniform over the admissible range."""
    if d < 2:
        raise ValueError("d must be >= 2")
    rho = float(rng.uniform(RHO_MIN, RHO_MAX))
    s = patch_side(rho, d)
    j1 = int(rng.integers(0, d - s + 1))
    j2 = int(rng.integers(0, d - s + 1))
    return PatchConfig(rho, j1, j2, d)


def sample_patch_configs(rng: np.random.Generator, d: int, n: int) -> list[PatchConfig]:
    return [sample_patch_config(rng, d) for _ in range(n)]


def cubic_kernel(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


@lru_cache(maxsize=512)
def _resize_matrix_np(src: int, dst: int) -> np.ndarray:
    w = np.zeros((dst, src), dtype=np.float64)
    if src == dst:
        np.fill_diagonal(w, 1.0)
        return w
    scale = src / dst
    for i in range(dst):
        centre = (i + 0.5) * scale - 0.5
        base = math.floor(centre)
        for k in range(base - 1, base + 3):
            weight = float(cubic_kernel(centre - k))
            w[i, min(max(k, 0), src - 1)] += weight
    return w


def resize_matrix(src: int, dst: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``(dst, src)`` bicubic interpolation matrix along one axis."""
    return torch.as_tensor(_resize_matrix_np(src, dst), dtype=dtype, device=device)


def _check(cfg: PatchConfig, d: int):
    if cfg.d != d:
        raise ValueError(f"patch config built for d={cfg.d}, image has d={d}")


def apply_patch(cfg: PatchConfig, img):
    """Crop and resample one ``d x d x c`` image (numpy array or tensor)."""
    if isinstance(img, np.ndarray):
        if img.ndim != 3 or img.shape[0] != img.shape[1]:
            raise ValueError(f"expected d x d x c image, got shape {img.shape}")
        _check(cfg, img.shape[0])
        s, d = cfg.side, cfg.d
        crop = img[cfg.j1:cfg.j1 + s, cfg.j2:cfg.j2 + s, :].astype(np.float64)
        w = _resize_matrix_np(s, d)
        return np.einsum("is,stc,jt->ijc", w, crop, w).astype(img.dtype, copy=False)
    x = img.permute(2, 0, 1).unsqueeze(0)
    return apply_patch_batch([cfg], x)[0].permute(1, 2, 0)


def apply_patch_batch(cfgs, batch: torch.Tensor) -> torch.Tensor:
    """Per-sample patch operator on an ``(n, c, d, d)`` tensor; differentiable in pixels."""
    if batch.ndim != 4 or batch.shape[-1] != batch.shape[-2]:
        raise ValueError(f"expected (n, c, d, d) batch, got {tuple(batch.shape)}")
    if len(cfgs) != batch.shape[0]:
        raise ValueError(f"{len(cfgs)} patch configs for a batch of {batch.shape[0]}")
    d = batch.shape[-1]
    out = []
    for cfg, x in zip(cfgs, batch):
        _check(cfg, d)
        s = cfg.side
        if s == d:
            out.append(x)
            continue
        crop = x[:, cfg.j1:cfg.j1 + s, cfg.j2:cfg.j2 + s]
        w = resize_matrix(s, d, dtype=batch.dtype, device=batch.device)
        out.append(w @ crop @ w.T)
    return torch.stack(out)
