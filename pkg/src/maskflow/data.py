"""Synthetic audio-video corpus.

Each clip is a deterministic function of the seed: a static identity
pattern in the top strip, a colored shape translating through the
middle band, and a mouth rectangle whose brightness follows the
amplitude envelope of a synthesized waveform. Prompts name the color,
shape, and motion direction using the toy vocabulary. Artifact
injection produces tagged negative examples; the oracle recovers the
tags from pixels alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import torch
from torch import Tensor

from .masks import Region
from .metrics import envelope, metric_identity

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.85, 0.20),
    "blue": (0.20, 0.25, 0.90),
    "yellow": (0.90, 0.85, 0.20),
}
SHAPES = ("square", "circle")

#: Waveform samples per audio feature window.
AUDIO_HOP = 20
#: Whole sine cycles per feature window, so every window sees the same
#: phase and the extracted envelope is exactly proportional to the
#: per-frame amplitude.
_CYCLES_PER_WINDOW = 3

CHROMA_DRIFT_THRESHOLD = 0.05
IDENTITY_THRESHOLD = 0.5
COLOR_DRIFT_STEP = 0.04


class MotionLabel(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class SyntheticClip:
    pixels: Tensor  # (T, 3, H, W), values in [0, 1]
    waveform: Tensor
    prompt: str
    mouth: Region
    motion: MotionLabel
    issue: str | None = None


def default_mouth_region(height: int, width: int) -> Region:
    return Region(
        (3 * height) // 4,
        (3 * width) // 8,
        max(2, (3 * height) // 16),
        max(2, width // 4),
    )


def identity_region(height: int, width: int) -> Region:
    """Top strip holding the static identity pattern."""
    return Region(0, 0, max(2, height // 4), width)


def _identity_pattern(height: int, width: int, generator: torch.Generator) -> Tensor:
    """Blocky random color pattern at 4x4 granularity."""
    bh, bw = max(1, height // 4), max(1, width // 4)
    blocks = torch.rand(3, bh, bw, generator=generator)
    up = blocks.repeat_interleave(4, dim=1).repeat_interleave(4, dim=2)
    return up[:, :height, :width]


def synth_waveform(frame_env: Tensor, alpha: int, hop: int = AUDIO_HOP) -> Tensor:
    """Amplitude-modulated sine; each video frame gets alpha feature windows."""
    frames = frame_env.shape[0]
    n = frames * alpha * hop
    idx = torch.arange(n, dtype=torch.float32)
    carrier = torch.sin(2.0 * torch.pi * _CYCLES_PER_WINDOW * idx / hop)
    env = frame_env.repeat_interleave(alpha * hop)
    return env * carrier


def _draw_shape(
    frame: Tensor, shape: str, color: tuple[float, float, float], row: int, col: int, size: int
) -> None:
    patch = frame[:, row : row + size, col : col + size]
    tint = torch.tensor(color).reshape(3, 1, 1)
    if shape == "square":
        patch.copy_(tint.expand_as(patch))
    else:
        yy, xx = torch.meshgrid(
            torch.arange(size, dtype=torch.float32),
            torch.arange(size, dtype=torch.float32),
            indexing="ij",
        )
        c = (size - 1) / 2.0
        inside = ((yy - c) ** 2 + (xx - c) ** 2) <= (size / 2.0) ** 2
        patch.copy_(torch.where(inside, tint.expand_as(patch), patch))


def _trajectory(
    motion: MotionLabel, frames: int, band_top: int, band_bottom: int, width: int, size: int
) -> list[tuple[int, int]]:
    """Integer (row, col) per frame; the shape never leaves the band."""
    col_step, row_step = 2, 1
    mid_row = (band_top + band_bottom - size) // 2
    mid_col = (width - size) // 2
    if motion == MotionLabel.LEFT:
        start = (mid_row, width - size - 1)
        delta = (0, -col_step)
    elif motion == MotionLabel.RIGHT:
        start = (mid_row, 1)
        delta = (0, col_step)
    elif motion == MotionLabel.UP:
        start = (band_bottom - size - 1, mid_col)
        delta = (-row_step, 0)
    else:
        start = (band_top + 1, mid_col)
        delta = (row_step, 0)
    path = []
    row, col = start
    for _ in range(frames):
        row = min(max(row, band_top), band_bottom - size)
        col = min(max(col, 0), width - size)
        path.append((row, col))
        row += delta[0]
        col += delta[1]
    return path


def make_clip(
    color: str,
    shape: str,
    motion: MotionLabel,
    frame_env: Tensor,
    identity: Tensor,
    t_video: int,
    height: int,
    width: int,
    alpha: int = 2,
) -> SyntheticClip:
    mouth = default_mouth_region(height, width)
    ident = identity_region(height, width)
    band_top = ident.height
    band_bottom = mouth.top
    size = max(4, height // 4)
    path = _trajectory(motion, t_video, band_top, band_bottom, width, size)
    pixels = torch.full((t_video, 3, height, width), 0.5)
    for j in range(t_video):
        frame = pixels[j]
        frame[:, : ident.height, :] = identity
        _draw_shape(frame, shape, COLORS[color], path[j][0], path[j][1], size)
        brightness = 0.2 + 0.6 * float(frame_env[j])
        frame[
            :,
            mouth.top : mouth.top + mouth.height,
            mouth.left : mouth.left + mouth.width,
        ] = brightness
    waveform = synth_waveform(frame_env, alpha)
    prompt = f"{color} {shape} moves {motion.value}"
    return SyntheticClip(
        pixels=pixels,
        waveform=waveform,
        prompt=prompt,
        mouth=mouth,
        motion=motion,
    )


def gen_dataset(
    n: int,
    t_video: int = 8,
    height: int = 32,
    width: int = 32,
    seed: int = 0,
    alpha: int = 2,
) -> list[SyntheticClip]:
    """Deterministic corpus of n clips for one seed."""
    g = torch.Generator().manual_seed(seed)
    color_names = tuple(COLORS)
    motions = tuple(MotionLabel)
    clips = []
    for _ in range(n):
        color = color_names[int(torch.randint(len(color_names), (1,), generator=g))]
        shape = SHAPES[int(torch.randint(len(SHAPES), (1,), generator=g))]
        motion = motions[int(torch.randint(len(motions), (1,), generator=g))]
        frame_env = 0.15 + 0.8 * torch.rand(t_video, generator=g)
        identity = _identity_pattern(identity_region(height, width).height, width, g)
        clips.append(
            make_clip(color, shape, motion, frame_env, identity, t_video, height, width, alpha)
        )
    return clips


def clip_latent(pixels: Tensor, r: int) -> Tensor:
    """Average r consecutive pixel frames into one latent frame."""
    t_video = pixels.shape[0]
    if r < 1 or t_video % r:
        raise ValueError(f"{t_video} frames do not pool into groups of {r}")
    shape = pixels.shape[1:]
    return pixels.reshape(t_video // r, r, *shape).mean(dim=1)


def inject_artifact(clip: SyntheticClip, kind: str, seed: int = 0) -> SyntheticClip:
    """Produce a tagged negative: a hue drift or a mid-clip identity swap."""
    t_video, _, height, width = clip.pixels.shape
    if kind == "color_shift":
        pixels = clip.pixels.clone()
        for j in range(t_video):
            pixels[j, 0] += COLOR_DRIFT_STEP * j
            pixels[j, 2] -= COLOR_DRIFT_STEP * j
        pixels.clamp_(0.0, 1.0)
        return replace(clip, pixels=pixels, issue="color_shift")
    if kind == "identity_swap":
        g = torch.Generator().manual_seed(seed + 7919)
        ident = identity_region(height, width)
        pixels = clip.pixels.clone()
        # redraw until the new pattern is genuinely dissimilar; the blocky
        # patterns have few degrees of freedom, so a single draw can land
        # close to the original by chance
        for _ in range(16):
            pattern = _identity_pattern(ident.height, width, g)
            pixels[t_video // 3 :, :, : ident.height, :] = pattern
            score = metric_identity(pixels, pixels[0], ident)
            if score < IDENTITY_THRESHOLD - 0.15:
                break
        return replace(clip, pixels=pixels, issue="identity_swap")
    raise ValueError(f"unknown artifact kind {kind!r}")


def chroma_drift(pixels: Tensor) -> float:
    """Largest per-frame change of the red-minus-blue spatial mean.

    Measured below the identity strip so that an identity swap (which
    recolors the strip) does not register as a hue drift.
    """
    strip = identity_region(pixels.shape[2], pixels.shape[3]).height
    body = pixels[:, :, strip:, :]
    mu = body[:, 0].mean(dim=(1, 2)) - body[:, 2].mean(dim=(1, 2))
    return (mu - mu[0]).abs().max().item()


def oracle_tag(clip: SyntheticClip) -> str | None:
    """Recover the injected issue tag from pixels, or None if clean."""
    if chroma_drift(clip.pixels) > CHROMA_DRIFT_THRESHOLD:
        return "color_shift"
    _, _, height, width = clip.pixels.shape
    ident = metric_identity(
        clip.pixels, clip.pixels[0], identity_region(height, width)
    )
    if ident < IDENTITY_THRESHOLD:
        return "identity_swap"
    return None
