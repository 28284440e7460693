"""Toy video diffusion transformer with flow-matching parameterization.

The model consumes the assembled task input (noisy latent, masked
reference, mask) as patch tokens with fixed sinusoidal spatiotemporal
positions, runs alternating self-attention / multi-modal cross
attention / MLP blocks modulated by a timestep embedding, and predicts
the straight-path velocity (noise minus data). Blocks follow the
adaLN-zero recipe: modulation layers and the output head start at zero,
so a freshly built model predicts exactly zero velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import MultiModalCrossAttention, _attend
from .features import ModalBundle, downsample_face_mask
from .masks import TaskMask
from .phase_weights import PhaseWeightConfig, weights_all_tensor

TAU_MAX = 1000.0


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 4
    d_model: int = 128
    patch: int = 4
    latent_frames: int = 4
    channels: int = 3
    height: int = 32
    width: int = 32
    heads: int = 4
    d_cond: int = 64
    d_attn: int | None = None
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"spatial dims ({self.height}, {self.width}) not divisible by patch {self.patch}"
            )
        if self.d_model % 2:
            raise ValueError("d_model must be even")

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.latent_frames, self.height // self.patch, self.width // self.patch)

    @property
    def tokens(self) -> int:
        f, gh, gw = self.grid
        return f * gh * gw

    @property
    def in_channels(self) -> int:
        return 2 * self.channels + 1


@dataclass(frozen=True)
class DiffusionState:
    """A point on the straight noising path x_t = (1-t) x0 + t eps."""

    tau: float
    x_t: Tensor

    @property
    def t(self) -> float:
        return self.tau / TAU_MAX


def make_diffusion_state(x0: Tensor, eps: Tensor, tau: float) -> DiffusionState:
    if x0.shape != eps.shape:
        raise ValueError("data and noise shapes differ")
    if not (0.0 <= tau <= TAU_MAX):
        raise ValueError(f"tau {tau} outside [0, {TAU_MAX}]")
    t = tau / TAU_MAX
    return DiffusionState(tau=tau, x_t=(1.0 - t) * x0 + t * eps)


def to_patches(x: Tensor, patch: int) -> Tensor:
    """Flatten (..., F, C, H, W) into (..., F*gh*gw, C*p*p) patch rows."""
    *lead, frames, channels, height, width = x.shape
    gh, gw = height // patch, width // patch
    x = x.reshape(*lead, frames, channels, gh, patch, gw, patch)
    n = x.dim()
    # (..., F, C, gh, p, gw, p) -> (..., F, gh, gw, C, p, p)
    x = x.permute(*range(n - 6), n - 6, n - 4, n - 2, n - 5, n - 3, n - 1)
    return x.reshape(*lead, frames * gh * gw, channels * patch * patch)


def from_patches(
    tokens: Tensor, frames: int, channels: int, height: int, width: int, patch: int
) -> Tensor:
    """Exact inverse of :func:`to_patches`."""
    *lead, _, _ = tokens.shape
    gh, gw = height // patch, width // patch
    x = tokens.reshape(*lead, frames, gh, gw, channels, patch, patch)
    n = x.dim()
    # (..., F, gh, gw, C, p, p) -> (..., F, C, gh, p, gw, p)
    x = x.permute(*range(n - 6), n - 6, n - 3, n - 5, n - 2, n - 4, n - 1)
    return x.reshape(*lead, frames, channels, height, width)


def _sincos_1d(positions: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = positions[:, None].to(torch.float64) * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def spatiotemporal_positions(
    frames: int, grid_h: int, grid_w: int, d_model: int
) -> Tensor:
    """Fixed sinusoidal position code per token, split across (t, h, w) axes."""
    d_hw = (d_model // 3) // 2 * 2
    d_t = d_model - 2 * d_hw
    et = _sincos_1d(torch.arange(frames), d_t)
    eh = _sincos_1d(torch.arange(grid_h), d_hw)
    ew = _sincos_1d(torch.arange(grid_w), d_hw)
    parts = torch.cat(
        [
            et[:, None, None, :].expand(frames, grid_h, grid_w, d_t),
            eh[None, :, None, :].expand(frames, grid_h, grid_w, d_hw),
            ew[None, None, :, :].expand(frames, grid_h, grid_w, d_hw),
        ],
        dim=-1,
    )
    return parts.reshape(frames * grid_h * grid_w, d_model)


def timestep_features(tau: Tensor, dim: int) -> Tensor:
    """Sinusoidal features of the (continuous) timestep in [0, 1000]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = tau.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.out(_attend(q, k, v, self.heads))


class Block(nn.Module):
    """Self-attention -> cross-attention -> MLP, adaLN-modulated."""

    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = SelfAttention(d, cfg.heads)
        self.cross = MultiModalCrossAttention(d, cfg.d_cond, cfg.d_attn, cfg.heads)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_ratio * d),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * d, d),
        )
        self.modulation = nn.Linear(d, 9 * d)

    def forward(
        self,
        x: Tensor,
        temb: Tensor,
        text: Tensor,
        audio_segments: Tensor,
        image: Tensor,
        face_gate: Tensor | None,
        weights: dict[str, Tensor],
    ) -> Tensor:
        mods = self.modulation(F.silu(temb)).unsqueeze(1).chunk(9, dim=-1)
        sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = mods
        x = x + g1 * self.attn(self.norm1(x) * (1 + sc1) + sh1)
        x = x + g2 * self.cross.forward_batch(
            self.norm2(x) * (1 + sc2) + sh2, text, audio_segments, image, face_gate, weights
        )
        x = x + g3 * self.mlp(self.norm3(x) * (1 + sc3) + sh3)
        return x


class VideoBackbone(nn.Module):
    """Velocity-prediction transformer over patch tokens."""

    def __init__(
        self, cfg: BackboneConfig, phase_cfg: PhaseWeightConfig | None = None
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.phase_cfg = phase_cfg or PhaseWeightConfig()
        d = cfg.d_model
        patch_dim = cfg.in_channels * cfg.patch * cfg.patch
        self.patch_embed = nn.Linear(patch_dim, d)
        frames, gh, gw = cfg.grid
        self.register_buffer(
            "pos", spatiotemporal_positions(frames, gh, gw, d).to(torch.float32)
        )
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm_final = nn.LayerNorm(d, elementwise_affine=False)
        self.final_modulation = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, cfg.channels * cfg.patch * cfg.patch)
        self.reset_parameters(torch.Generator().manual_seed(0))

    def reset_parameters(self, generator: torch.Generator) -> None:
        """Seeded init: small normal weights, zero biases, adaLN-zero."""
        for module in self.modules():
            if isinstance(module, nn.Linear):
                w = torch.randn(
                    module.weight.shape, generator=generator, dtype=module.weight.dtype
                )
                with torch.no_grad():
                    module.weight.copy_(0.02 * w)
                    if module.bias is not None:
                        module.bias.zero_()
        with torch.no_grad():
            for block in self.blocks:
                block.modulation.weight.zero_()
                block.modulation.bias.zero_()
            self.final_modulation.weight.zero_()
            self.final_modulation.bias.zero_()
            self.head.weight.zero_()
            self.head.bias.zero_()

    def randomize_parameters(self, generator: torch.Generator, std: float = 0.05) -> None:
        """Overwrite every parameter with seeded noise (gradient-check aid)."""
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(std * torch.randn(p.shape, generator=generator, dtype=p.dtype))

    def patchify(self, x: Tensor) -> Tensor:
        """Embed an assembled input (F, 2C+1, H, W) into position-coded tokens."""
        self._check_input(x)
        return self.patch_embed(to_patches(x, self.cfg.patch)) + self.pos.to(x.dtype)

    def _check_input(self, x: Tensor) -> None:
        cfg = self.cfg
        expect = (cfg.latent_frames, cfg.in_channels, cfg.height, cfg.width)
        if tuple(x.shape[-4:]) != expect:
            raise ValueError(f"expected input shaped {expect}, got {tuple(x.shape)}")

    def _face_gate(self, bundle: ModalBundle) -> Tensor | None:
        if bundle.face_mask is None:
            return None
        frames, gh, gw = self.cfg.grid
        shape = tuple(bundle.face_mask.values.shape)
        if shape == (frames, self.cfg.height, self.cfg.width):
            pooled = downsample_face_mask(bundle.face_mask, self.cfg.patch)
        elif shape == (frames, gh, gw):
            pooled = bundle.face_mask
        else:
            raise ValueError(f"face mask grid {shape} matches neither latent nor token grid")
        return pooled.values.reshape(1, -1)

    def forward(
        self,
        x: Tensor,
        bundle: ModalBundle,
        tau: float,
        modal_scales: dict[str, float] | None = None,
    ) -> Tensor:
        """Predict velocity (F, C, H, W) for one assembled input."""
        v = self.forward_batch(
            x.unsqueeze(0),
            bundle.text.tokens.unsqueeze(0),
            bundle.audio.segments.unsqueeze(0),
            bundle.image.tokens.unsqueeze(0),
            self._face_gate(bundle),
            torch.tensor([float(tau)]),
            modal_scales=modal_scales,
        )
        return v.squeeze(0)

    def forward_batch(
        self,
        x: Tensor,
        text: Tensor,
        audio_segments: Tensor,
        image: Tensor,
        face_gate: Tensor | None,
        tau: Tensor,
        modal_scales: dict[str, float] | None = None,
    ) -> Tensor:
        self._check_input(x)
        cfg = self.cfg
        dtype = self.patch_embed.weight.dtype
        tokens = self.patch_embed(to_patches(x.to(dtype), cfg.patch)) + self.pos.to(dtype)
        temb = self.time_mlp(timestep_features(tau, cfg.d_model).to(dtype))
        weights = weights_all_tensor(tau, self.phase_cfg)
        weights = {m: w.to(dtype) for m, w in weights.items()}
        if modal_scales:
            weights = {m: w * modal_scales.get(m, 1.0) for m, w in weights.items()}
        if face_gate is not None and face_gate.shape[0] == 1 and x.shape[0] > 1:
            face_gate = face_gate.expand(x.shape[0], -1)
        for block in self.blocks:
            tokens = block(
                tokens,
                temb,
                text.to(dtype),
                audio_segments.to(dtype),
                image.to(dtype),
                face_gate,
                weights,
            )
        shift, scale = self.final_modulation(F.silu(temb)).unsqueeze(1).chunk(2, dim=-1)
        out = self.head(self.norm_final(tokens) * (1 + scale) + shift)
        return from_patches(
            out, cfg.latent_frames, cfg.channels, cfg.height, cfg.width, cfg.patch
        )


def flow_matching_loss(
    v_hat: Tensor,
    x0: Tensor,
    eps: Tensor,
    mask: TaskMask | Tensor,
    masked_only: bool = True,
) -> Tensor:
    """Mean squared velocity error over generated positions.

    The target velocity is eps - x0. Positions with mask 0 contribute
    nothing; with ``masked_only`` off the mean runs over every position
    (ablation toggle).
    """
    mask_values = mask.values if isinstance(mask, TaskMask) else mask
    if v_hat.shape != x0.shape or x0.shape != eps.shape:
        raise ValueError("prediction, data, and noise must share a shape")
    err = (v_hat - (eps - x0)) ** 2
    if not masked_only:
        return err.mean()
    m = torch.broadcast_to(mask_values.to(err.dtype), err.shape)
    total = m.sum()
    if float(total) == 0.0:
        raise ValueError("mask selects no positions")
    return (err * m).sum() / total


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
