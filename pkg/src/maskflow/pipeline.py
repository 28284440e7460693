"""Turning corpus clips into model-ready tensors.

One place owns the mapping from a synthetic clip to (clean latent,
condition bundle, task masks): temporal pooling into latent frames,
audio windowing and per-frame segmentation, prompt and reference-frame
encoding, and the facial gate. The trainer, the sampler, and the CLI
all go through these helpers so conditions are always built the same
way.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .data import SyntheticClip, clip_latent
from .features import (
    AudioEmbeddings,
    AudioSegments,
    FaceMask,
    ImageFeatures,
    ModalBundle,
    TextEncoder,
    TextFeatures,
    encode_audio,
    encode_image,
    face_mask_from_region,
    segment_audio,
)
from .masks import Region, TaskKind, TaskMask, build_task_mask


@dataclass(frozen=True)
class PipelineConfig:
    """Sizes and seeds of the fixed condition encoders."""

    r: int = 2          # pixel frames per latent frame
    alpha: int = 2      # audio feature windows per pixel frame
    extend: int = 1     # extra audio context per side, on top of r
    d_cond: int = 64
    image_patch: int = 4
    text_seed: int = 11
    audio_seed: int = 12
    image_seed: int = 13


@dataclass(frozen=True)
class PreparedClip:
    """A clip encoded for the backbone: clean latent plus conditions."""

    latent: Tensor       # (latent_frames, C, H, W)
    bundle: ModalBundle  # face mask on the latent-resolution grid
    mouth: Region        # mouth rectangle in latent-grid cells
    prompt: str
    t_video: int
    # full-length windowed audio, kept so long-form sampling can re-segment
    # per generation window instead of reusing whole-clip segments
    audio_features: AudioEmbeddings | None = None

    @property
    def latent_frames(self) -> int:
        return self.latent.shape[0]


def make_text_encoder(pcfg: PipelineConfig) -> TextEncoder:
    return TextEncoder(d_cond=pcfg.d_cond, seed=pcfg.text_seed)


def encode_clip(
    clip: SyntheticClip,
    pcfg: PipelineConfig,
    text_encoder: TextEncoder | None = None,
) -> PreparedClip:
    t_video = clip.pixels.shape[0]
    height, width = clip.pixels.shape[2], clip.pixels.shape[3]
    latent = clip_latent(clip.pixels, pcfg.r)
    frames = latent.shape[0]
    enc = text_encoder or make_text_encoder(pcfg)
    text = enc.encode(clip.prompt)
    audio_emb = encode_audio(
        clip.waveform, pcfg.alpha, t_video, d_cond=pcfg.d_cond, seed=pcfg.audio_seed
    )
    audio = segment_audio(audio_emb, pcfg.r, pcfg.extend, frames)
    image = encode_image(
        clip.pixels[0], patch=pcfg.image_patch, d_cond=pcfg.d_cond, seed=pcfg.image_seed
    )
    face = face_mask_from_region(
        clip.mouth.top,
        clip.mouth.left,
        clip.mouth.height,
        clip.mouth.width,
        frames=frames,
        height=height,
        width=width,
    )
    return PreparedClip(
        latent=latent,
        bundle=ModalBundle(text=text, audio=audio, image=image, face_mask=face),
        mouth=clip.mouth,
        prompt=clip.prompt,
        t_video=t_video,
        audio_features=audio_emb,
    )


def task_mask_for(kind: TaskKind, prepared: PreparedClip) -> TaskMask:
    frames, _, height, width = prepared.latent.shape
    region = prepared.mouth if kind == TaskKind.LIP_SYNC else None
    return build_task_mask(kind, (frames, height, width), region=region)


def bundle_for_task(
    prepared: PreparedClip,
    kind: TaskKind,
    drop_text: bool = False,
    drop_audio: bool = False,
) -> ModalBundle:
    """Condition bundle for one task, with optional null conditions.

    Dropped modalities become zero features (the unconditional state
    classifier-free guidance extrapolates against). Text-to-video never
    sees reference-image features.
    """
    base = prepared.bundle
    text = TextFeatures(tokens=torch.zeros_like(base.text.tokens)) if drop_text else base.text
    audio = (
        AudioSegments(
            segments=torch.zeros_like(base.audio.segments),
            r=base.audio.r,
            e=base.audio.e,
        )
        if drop_audio
        else base.audio
    )
    image = (
        ImageFeatures(tokens=torch.zeros_like(base.image.tokens))
        if kind == TaskKind.T2V
        else base.image
    )
    return ModalBundle(text=text, audio=audio, image=image, face_mask=base.face_mask)


def stack_bundles(bundles: list[ModalBundle]) -> tuple[Tensor, Tensor, Tensor]:
    """Batch the text/audio/image features of same-shaped bundles."""
    text = torch.stack([b.text.tokens for b in bundles])
    audio = torch.stack([b.audio.segments for b in bundles])
    image = torch.stack([b.image.tokens for b in bundles])
    return text, audio, image


def assemble_batch(noisy: Tensor, reference: Tensor, mask_values: Tensor) -> Tensor:
    """Batched model input: [noisy, reference outside mask, mask] channels.

    noisy/reference are (B, F, C, H, W); the (F, 1, H, W) mask is shared
    across the batch.
    """
    keep = 1.0 - mask_values
    conditioning = reference * keep
    mask_channel = mask_values.expand(noisy.shape[0], *mask_values.shape)
    return torch.cat([noisy, conditioning, mask_channel.to(noisy.dtype)], dim=-3)


def latent_to_pixels(latent: Tensor, r: int) -> Tensor:
    """Nearest-neighbor temporal upsample of a latent clip back to pixels."""
    return latent.clamp(0.0, 1.0).repeat_interleave(r, dim=0)


def face_gate_tokens(face_mask: FaceMask, patch: int) -> Tensor:
    """Flattened 0/1 token gate of a latent-resolution facial mask."""
    from .features import downsample_face_mask

    return downsample_face_mask(face_mask, patch).values.reshape(-1)
