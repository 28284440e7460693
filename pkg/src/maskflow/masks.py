"""Task masks over the latent grid.

Each animation task (text-to-video, image-to-video, first-last-frame,
lip sync) is expressed as a masked-reconstruction problem: a binary
mask marks which latent positions the model must generate (1) and which
are given (0). The mask is also the only thing that distinguishes the
tasks at the model input.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
from torch import Tensor


class TaskKind(str, Enum):
    T2V = "t2v"
    I2V = "i2v"
    FLF2V = "flf2v"
    LIP_SYNC = "lip_sync"


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in the latent spatial grid (cells)."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"region must have positive extent, got {self}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"region origin must be non-negative, got {self}")

    def check_inside(self, grid_h: int, grid_w: int) -> None:
        if self.top + self.height > grid_h or self.left + self.width > grid_w:
            raise ValueError(
                f"region {self} exceeds grid ({grid_h}, {grid_w})"
            )


@dataclass(frozen=True)
class TaskMask:
    """Binary (frames, 1, H, W) tensor; 1 = generate, 0 = given."""

    values: Tensor
    kind: TaskKind

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def build_task_mask(
    kind: TaskKind,
    shape: tuple[int, int, int],
    region: Region | None = None,
    dtype: torch.dtype = torch.float32,
) -> TaskMask:
    """Build the 0-1 mask pattern for one task over a (frames, H, W) grid.

    T2V masks everything; I2V keeps frame 0; FLF2V keeps the first and
    last frames; LIP_SYNC masks only the mouth rectangle on every frame
    (``region`` is required for it and rejected for the others).
    """
    frames, height, width = shape
    if frames < 1 or height < 1 or width < 1:
        raise ValueError(f"invalid mask shape {shape}")
    if kind == TaskKind.LIP_SYNC:
        if region is None:
            raise ValueError("lip-sync mask requires a mouth region")
        region.check_inside(height, width)
    elif region is not None:
        raise ValueError(f"region is only valid for lip-sync, got {kind}")

    values = torch.ones(frames, 1, height, width, dtype=dtype)
    if kind == TaskKind.T2V:
        pass
    elif kind == TaskKind.I2V:
        values[0] = 0.0
    elif kind == TaskKind.FLF2V:
        if frames < 2:
            raise ValueError("first-last-frame mask needs at least 2 frames")
        values[0] = 0.0
        values[-1] = 0.0
    elif kind == TaskKind.LIP_SYNC:
        assert region is not None
        values.zero_()
        values[
            :,
            :,
            region.top : region.top + region.height,
            region.left : region.left + region.width,
        ] = 1.0
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown task kind {kind}")
    return TaskMask(values=values, kind=kind)


def mask_ratio(mask: TaskMask) -> float:
    """Fraction of latent positions marked to generate."""
    return mask.values.sum().item() / mask.values.numel()


def assemble_model_input(
    noisy: Tensor, clean_reference: Tensor, mask: TaskMask
) -> Tensor:
    """Stack [noisy latent, masked reference, mask] along channels.

    The conditioning block is the clean reference with generated
    positions zeroed, so the model sees exactly the given content and
    nothing else. Output shape is (frames, 2C+1, H, W).
    """
    if noisy.shape != clean_reference.shape:
        raise ValueError(
            f"latent shapes differ: {tuple(noisy.shape)} vs {tuple(clean_reference.shape)}"
        )
    _check_mask_matches(noisy, mask)
    keep = 1.0 - mask.values  # (frames, 1, H, W), broadcasts over channels
    conditioning = clean_reference * keep
    return torch.cat([noisy, conditioning, mask.values.to(noisy.dtype)], dim=1)


def reimpose_known(latent: Tensor, reference: Tensor, mask: TaskMask) -> Tensor:
    """Pin given regions back to the reference: mask*latent + (1-mask)*reference."""
    if latent.shape != reference.shape:
        raise ValueError(
            f"latent shapes differ: {tuple(latent.shape)} vs {tuple(reference.shape)}"
        )
    _check_mask_matches(latent, mask)
    m = mask.values.to(latent.dtype)
    return m * latent + (1.0 - m) * reference


def _check_mask_matches(latent: Tensor, mask: TaskMask) -> None:
    lf, _, lh, lw = latent.shape
    mf, _, mh, mw = mask.values.shape
    if (lf, lh, lw) != (mf, mh, mw):
        raise ValueError(
            f"mask grid {(mf, mh, mw)} does not match latent grid {(lf, lh, lw)}"
        )
