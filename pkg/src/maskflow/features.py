"""Condition features: toy text/audio/image encoders and audio-frame alignment.

The encoders are fixed seeded linear maps rather than learned networks,
so all learnable capacity lives in the backbone and every feature here
is a deterministic function of (input, seed). Audio features are
windowed energy + band magnitudes; per latent frame they are regrouped
into fixed-length overlapping segments so the audio branch can attend
frame-locally.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

D_COND_DEFAULT = 64

# Raw audio descriptor: log energy + 8 spectral band magnitudes.
_AUDIO_RAW_DIM = 9
_AUDIO_BANDS = 8

#: Tokens the toy vocabulary always contains; index 0 is the BOS/padding token.
DEFAULT_VOCAB = (
    "<bos>",
    "red",
    "green",
    "blue",
    "yellow",
    "square",
    "circle",
    "moves",
    "left",
    "right",
    "up",
    "down",
    "still",
    "calm",
    "scene",
    "jerky",
    "warped",
    "gesture",
    "blurry",
    "flicker",
    "banding",
)


@dataclass(frozen=True)
class TextFeatures:
    """Embedded prompt tokens, one row per token."""

    tokens: Tensor  # (L_t, d_cond)


@dataclass(frozen=True)
class AudioEmbeddings:
    """Per-window audio features; ``alpha`` windows per video frame."""

    features: Tensor  # (t_a, d_cond)
    alpha: int

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class AudioSegments:
    """One fixed-length feature segment per latent frame."""

    segments: Tensor  # (latent_frames, 2*(r+e)+1, d_cond)
    r: int
    e: int

    @property
    def latent_frames(self) -> int:
        return self.segments.shape[0]


@dataclass(frozen=True)
class ImageFeatures:
    """Pooled patch tokens of the reference frame."""

    tokens: Tensor  # (L_i, d_cond)


@dataclass(frozen=True)
class FaceMask:
    """Binary (frames, H, W) gate for the audio branch output."""

    values: Tensor


@dataclass(frozen=True)
class ModalBundle:
    """All condition features consumed by one backbone forward."""

    text: TextFeatures
    audio: AudioSegments
    image: ImageFeatures
    face_mask: FaceMask | None = None


def _seeded_matrix(rows: int, cols: int, seed: int) -> Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(rows, cols, generator=g) / rows**0.5


class TextEncoder:
    """Vocabulary lookup into a fixed seeded embedding table."""

    def __init__(
        self,
        vocab: tuple[str, ...] | list[str] = DEFAULT_VOCAB,
        d_cond: int = D_COND_DEFAULT,
        seed: int = 0,
    ) -> None:
        if len(vocab) == 0:
            raise ValueError("vocabulary must not be empty")
        self.vocab = tuple(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        g = torch.Generator().manual_seed(seed)
        self.table = torch.randn(len(self.vocab), d_cond, generator=g)

    @property
    def d_cond(self) -> int:
        return self.table.shape[1]

    def encode_ids(self, ids: list[int]) -> TextFeatures:
        """Embed a token-id sequence; an empty prompt becomes a single BOS."""
        if not ids:
            ids = [0]
        for i in ids:
            if not (0 <= i < len(self.vocab)):
                raise ValueError(f"token id {i} outside vocabulary of {len(self.vocab)}")
        return TextFeatures(tokens=self.table[torch.tensor(ids, dtype=torch.long)].clone())

    def encode(self, prompt: str) -> TextFeatures:
        """Embed a whitespace-separated token string."""
        ids = []
        for tok in prompt.split():
            if tok not in self.index:
                raise ValueError(f"unknown token {tok!r}")
            ids.append(self.index[tok])
        return self.encode_ids(ids)


def load_vocab(path: str | Path) -> tuple[str, ...]:
    """Read a vocabulary file, one token per line."""
    lines = Path(path).read_text().splitlines()
    vocab = tuple(tok.strip() for tok in lines if tok.strip())
    if not vocab:
        raise ValueError(f"vocabulary file {path} is empty")
    return vocab


def save_vocab(vocab: tuple[str, ...] | list[str], path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab) + "\n")


def load_waveform(path: str | Path) -> Tensor:
    """Read a raw little-endian float32 waveform file."""
    data = np.fromfile(str(path), dtype="<f4")
    return torch.from_numpy(data.astype(np.float32))


def save_waveform(waveform: Tensor, path: str | Path) -> None:
    waveform.detach().cpu().numpy().astype("<f4").tofile(str(path))


def audio_raw_features(waveform: Tensor, num_windows: int) -> Tensor:
    """Split the waveform into equal windows; per window emit
    [log1p(energy), 8 spectral band magnitudes]."""
    if waveform.ndim != 1:
        raise ValueError("waveform must be a flat 1-D sequence")
    hop = waveform.shape[0] // num_windows
    if hop < 1:
        raise ValueError(
            f"waveform of {waveform.shape[0]} samples too short for {num_windows} windows"
        )
    windows = waveform[: hop * num_windows].reshape(num_windows, hop).to(torch.float32)
    energy = windows.pow(2).mean(dim=1)
    spectrum = torch.fft.rfft(windows, dim=1).abs()
    if spectrum.shape[1] < _AUDIO_BANDS:
        # short windows: replicate the top bin so every band is non-empty
        pad = _AUDIO_BANDS - spectrum.shape[1]
        spectrum = torch.cat([spectrum, spectrum[:, -1:].expand(-1, pad)], dim=1)
    bands = [chunk.mean(dim=1) for chunk in torch.tensor_split(spectrum, _AUDIO_BANDS, dim=1)]
    return torch.stack([torch.log1p(energy), *bands], dim=1)


def encode_audio(
    waveform: Tensor,
    alpha: int,
    video_frames: int,
    d_cond: int = D_COND_DEFAULT,
    seed: int = 0,
) -> AudioEmbeddings:
    """Windowed audio features, ``alpha`` per video frame, projected to d_cond."""
    if alpha < 1 or video_frames < 1:
        raise ValueError("alpha and video_frames must be positive")
    t_a = video_frames * alpha
    raw = audio_raw_features(waveform, t_a)
    proj = _seeded_matrix(_AUDIO_RAW_DIM, d_cond, seed)
    return AudioEmbeddings(features=raw @ proj, alpha=alpha)


def segment_audio(
    emb: AudioEmbeddings, r: int, e: int, latent_frames: int
) -> AudioSegments:
    """Regroup audio features into one segment per latent frame.

    The features are split into ``latent_frames`` runs of r*alpha, each
    segment is centered on its run's middle feature and extended r+e
    features both ways (edge-replicated at the boundaries), giving a
    constant segment length of 2*(r+e)+1.
    """
    if r < 1 or e < 0 or latent_frames < 1:
        raise ValueError("need r >= 1, e >= 0, latent_frames >= 1")
    run = r * emb.alpha
    if emb.length != latent_frames * run:
        raise ValueError(
            f"{emb.length} audio features do not divide into {latent_frames} "
            f"runs of {run}"
        )
    half = r + e
    centers = torch.arange(latent_frames) * run + (run - 1) // 2
    offsets = torch.arange(-half, half + 1)
    idx = (centers[:, None] + offsets[None, :]).clamp(0, emb.length - 1)
    return AudioSegments(segments=emb.features[idx], r=r, e=e)


def segment_centers(r: int, alpha: int, latent_frames: int) -> list[int]:
    """Center feature index of each latent frame's run (0-indexed)."""
    run = r * alpha
    return [j * run + (run - 1) // 2 for j in range(latent_frames)]


def encode_image(
    reference_frame: Tensor,
    patch: int = 4,
    d_cond: int = D_COND_DEFAULT,
    seed: int = 0,
) -> ImageFeatures:
    """Non-overlapping patch means of the reference frame, projected to d_cond.

    Each patch is mean-pooled per channel; trailing rows/columns that do
    not fill a whole patch are dropped.
    """
    if reference_frame.ndim != 3:
        raise ValueError("reference frame must be (C, H, W)")
    channels, height, width = reference_frame.shape
    if height < patch or width < patch:
        raise ValueError(f"frame ({height}, {width}) smaller than patch {patch}")
    ph, pw = height // patch, width // patch
    trimmed = reference_frame[:, : ph * patch, : pw * patch].to(torch.float32)
    pooled = trimmed.reshape(channels, ph, patch, pw, patch).mean(dim=(2, 4))
    tokens_raw = pooled.permute(1, 2, 0).reshape(ph * pw, channels)
    proj = _seeded_matrix(channels, d_cond, seed)
    return ImageFeatures(tokens=tokens_raw @ proj)


def apply_face_mask(audio_branch_output: Tensor, face_mask: FaceMask) -> Tensor:
    """Zero audio-branch token rows outside the facial region.

    Tokens must be laid out row-major over (frame, row, col) of the face
    mask grid.
    """
    expected = face_mask.values.numel()
    if audio_branch_output.shape[0] != expected:
        raise ValueError(
            f"token count {audio_branch_output.shape[0]} does not match "
            f"face mask grid of {expected} positions"
        )
    gate = face_mask.values.reshape(-1, 1).to(audio_branch_output.dtype)
    return audio_branch_output * gate


def downsample_face_mask(face_mask: FaceMask, patch: int) -> FaceMask:
    """Pool a face mask to the backbone's patch-token grid (max per patch)."""
    frames, height, width = face_mask.values.shape
    if height % patch or width % patch:
        raise ValueError(f"face mask grid ({height}, {width}) not divisible by {patch}")
    v = face_mask.values.reshape(frames, height // patch, patch, width // patch, patch)
    return FaceMask(values=v.amax(dim=(2, 4)))


def face_mask_from_region(
    region_top: int,
    region_left: int,
    region_height: int,
    region_width: int,
    frames: int,
    height: int,
    width: int,
) -> FaceMask:
    """Static rectangular facial mask, identical on every frame."""
    values = torch.zeros(frames, height, width)
    values[
        :,
        region_top : region_top + region_height,
        region_left : region_left + region_width,
    ] = 1.0
    return FaceMask(values=values)
