"""Desk-scale evaluation metrics.

These are proxies built for the synthetic corpus: a lip-audio
correlation, a window-boundary seam ratio, an identity-region
similarity, and PSNR. They support relative comparisons between
experiment arms; none of them is calibrated against any external
benchmark.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .masks import Region


def pearson(a: Tensor, b: Tensor) -> float:
    """Pearson correlation of two 1-D series; zero variance gives 0."""
    a = a.to(torch.float64).flatten()
    b = b.to(torch.float64).flatten()
    if a.shape != b.shape:
        raise ValueError(f"series lengths differ: {a.shape[0]} vs {b.shape[0]}")
    a = a - a.mean()
    b = b - b.mean()
    denom = a.norm() * b.norm()
    if denom.item() == 0.0:
        return 0.0
    return float((a @ b) / denom)


def envelope(waveform: Tensor, frames: int) -> Tensor:
    """Per-frame amplitude envelope: mean |sample| over equal chunks."""
    if waveform.ndim != 1:
        raise ValueError("waveform must be 1-D")
    hop = waveform.shape[0] // frames
    if hop < 1:
        raise ValueError(f"waveform too short for {frames} frames")
    chunks = waveform[: hop * frames].reshape(frames, hop)
    return chunks.abs().mean(dim=1)


def mouth_brightness(pixels: Tensor, mouth: Region) -> Tensor:
    """Per-frame mean brightness inside the mouth rectangle."""
    if pixels.ndim != 4:
        raise ValueError("pixels must be (frames, C, H, W)")
    patch = pixels[
        :,
        :,
        mouth.top : mouth.top + mouth.height,
        mouth.left : mouth.left + mouth.width,
    ]
    return patch.mean(dim=(1, 2, 3))


def metric_sync(pixels: Tensor, waveform: Tensor, mouth: Region) -> float:
    """Correlation between mouth brightness and the audio envelope, in [-1, 1]."""
    brightness = mouth_brightness(pixels, mouth)
    env = envelope(waveform, pixels.shape[0])
    return pearson(brightness, env)


def metric_seam(
    video: Tensor, window_starts: list[int], overlap: int
) -> float:
    """Discontinuity at window joins relative to motion elsewhere.

    For every window after the first, the join is the frame pair
    straddling the start of that window's fresh (non-overlapped)
    content. Returns mean |frame difference| at joins divided by the
    same quantity over all other consecutive pairs; both-zero is
    defined as 1.0, as is the single-window case.
    """
    frames = video.shape[0]
    if frames < 2:
        raise ValueError("need at least 2 frames for a seam measurement")
    if len(window_starts) < 2:
        return 1.0
    joins = set()
    for start in window_starts[1:]:
        join = start + overlap
        if 1 <= join < frames:
            joins.add(join)
    diffs = (video[1:] - video[:-1]).abs().flatten(1).mean(dim=1)
    join_idx = sorted(j - 1 for j in joins)
    other_idx = [i for i in range(frames - 1) if i + 1 not in joins]
    if not join_idx:
        return 1.0
    at_joins = diffs[join_idx].mean().item()
    elsewhere = diffs[other_idx].mean().item() if other_idx else 0.0
    if elsewhere == 0.0:
        return 1.0 if at_joins == 0.0 else math.inf
    return at_joins / elsewhere


def _region_projection(dim_in: int, dim_out: int, seed: int) -> Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(dim_in, dim_out, generator=g) / dim_in**0.5


def metric_identity(
    video: Tensor,
    reference_frame: Tensor,
    region: Region,
    seed: int = 101,
    dim: int = 64,
) -> float:
    """Mean cosine similarity of projected identity-region content.

    Region pixels are mean-centered before a fixed seeded random
    projection, so unrelated random patterns score near zero instead of
    sharing a large constant component.
    """

    def project(frame: Tensor) -> Tensor:
        patch = frame[
            :,
            region.top : region.top + region.height,
            region.left : region.left + region.width,
        ].reshape(-1)
        patch = patch - patch.mean()
        proj = _region_projection(patch.shape[0], dim, seed)
        return patch.to(torch.float64) @ proj.to(torch.float64)

    ref = project(reference_frame)
    ref_norm = ref.norm()
    sims = []
    for frame in video:
        v = project(frame)
        denom = v.norm() * ref_norm
        sims.append(0.0 if denom.item() == 0.0 else float((v @ ref) / denom))
    return sum(sims) / len(sims)


def psnr(a: Tensor, b: Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give inf."""
    if a.shape != b.shape:
        raise ValueError("shapes differ")
    mse = (a.to(torch.float64) - b.to(torch.float64)).pow(2).mean().item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
