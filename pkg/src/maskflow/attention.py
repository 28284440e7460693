"""Multi-modal cross attention with a shared query and per-modal experts.

One query projection is shared by all condition modalities; each
modality owns its key/value projections and an output projection. The
branch outputs are summed with timestep-phase weights. Text and image
branches attend globally over their tokens; the audio branch attends
frame-locally (query tokens of latent frame j see only audio segment j)
and its output is gated by the facial hard-attention mask before the
sum. The residual connection around the whole block belongs to the
caller.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .features import AudioSegments, FaceMask, ModalBundle, apply_face_mask
from .phase_weights import MODALS, PhaseWeightConfig, weights_all


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over batched (B, L, D) tensors."""
    bsz, n_q, dim = q.shape
    n_k = k.shape[1]
    d_head = dim // heads
    q = q.reshape(bsz, n_q, heads, d_head).transpose(1, 2)
    k = k.reshape(bsz, n_k, heads, d_head).transpose(1, 2)
    v = v.reshape(bsz, n_k, heads, d_head).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_head)
    out = scores.softmax(dim=-1) @ v
    return out.transpose(1, 2).reshape(bsz, n_q, dim)


class ModalExpert(nn.Module):
    """Key/value/output projections of one condition modality."""

    def __init__(self, d_cond: int, d_attn: int, d_model: int) -> None:
        super().__init__()
        self.key = nn.Linear(d_cond, d_attn)
        self.value = nn.Linear(d_cond, d_attn)
        self.out = nn.Linear(d_attn, d_model)


class MultiModalCrossAttention(nn.Module):
    """Shared-query cross attention over text, image, and audio experts."""

    def __init__(
        self,
        d_model: int,
        d_cond: int,
        d_attn: int | None = None,
        heads: int = 4,
    ) -> None:
        super().__init__()
        d_attn = d_model if d_attn is None else d_attn
        if d_attn % heads:
            raise ValueError(f"d_attn {d_attn} not divisible by {heads} heads")
        self.heads = heads
        self.d_model = d_model
        self.d_cond = d_cond
        self.d_attn = d_attn
        self.query = nn.Linear(d_model, d_attn)
        self.experts = nn.ModuleDict(
            {modal: ModalExpert(d_cond, d_attn, d_model) for modal in MODALS}
        )

    def shared_query(self, z: Tensor) -> Tensor:
        """Project tokens (N, d_model) to the query space shared by all experts."""
        if z.shape[-1] != self.d_model:
            raise ValueError(f"expected d_model {self.d_model}, got {z.shape[-1]}")
        return self.query(z)

    def modal_attention(
        self, q: Tensor, features: Tensor | AudioSegments, modal: str
    ) -> Tensor:
        """One expert branch: attention of the shared query against the
        modality's keys/values, then that modality's output projection.

        ``features`` is (L, d_cond) for text/image; for audio it is the
        per-latent-frame segment tensor (frames, S, d_cond) and query
        tokens of frame j attend only within segment j.
        """
        if modal == "audio":
            seg = features.segments if isinstance(features, AudioSegments) else features
            return self._audio_branch(q.unsqueeze(0), seg.unsqueeze(0)).squeeze(0)
        return self._global_branch(
            q.unsqueeze(0), features.unsqueeze(0), modal
        ).squeeze(0)

    def _global_branch(self, q: Tensor, features: Tensor, modal: str) -> Tensor:
        expert = self.experts[modal]
        return expert.out(_attend(q, expert.key(features), expert.value(features), self.heads))

    def _audio_branch(self, q: Tensor, segments: Tensor) -> Tensor:
        # q: (B, N, d_attn); segments: (B, frames, S, d_cond)
        bsz, n_tokens, _ = q.shape
        frames = segments.shape[1]
        if n_tokens % frames:
            raise ValueError(
                f"{n_tokens} query tokens not divisible by {frames} latent frames"
            )
        per_frame = n_tokens // frames
        expert = self.experts["audio"]
        q_local = q.reshape(bsz * frames, per_frame, self.d_attn)
        k = expert.key(segments).reshape(bsz * frames, -1, self.d_attn)
        v = expert.value(segments).reshape(bsz * frames, -1, self.d_attn)
        out = _attend(q_local, k, v, self.heads)
        return expert.out(out.reshape(bsz, n_tokens, self.d_attn))

    def forward(
        self,
        z: Tensor,
        bundle: ModalBundle,
        tau: float | None = None,
        phase_cfg: PhaseWeightConfig | None = None,
        weights: dict[str, float] | None = None,
        modal_scales: dict[str, float] | None = None,
    ) -> Tensor:
        """Weighted sum of the three expert branches for tokens z (N, d_model).

        Weights come from the phase law at ``tau`` unless given
        explicitly; ``modal_scales`` multiplies them (ablation hook).
        The bundle's face mask grid must match the token grid.
        """
        if weights is None:
            if tau is None or phase_cfg is None:
                raise ValueError("need either explicit weights or (tau, phase_cfg)")
            weights = weights_all(tau, phase_cfg)
        if modal_scales:
            weights = {m: w * modal_scales.get(m, 1.0) for m, w in weights.items()}

        q = self.shared_query(z)
        out = torch.zeros_like(z)
        for modal in MODALS:
            if modal == "audio":
                branch = self.modal_attention(q, bundle.audio, modal)
                if bundle.face_mask is not None:
                    branch = apply_face_mask(branch, bundle.face_mask)
            elif modal == "text":
                branch = self.modal_attention(q, bundle.text.tokens, modal)
            else:
                branch = self.modal_attention(q, bundle.image.tokens, modal)
            out = out + weights[modal] * branch
        return out

    def forward_batch(
        self,
        z: Tensor,
        text: Tensor,
        audio_segments: Tensor,
        image: Tensor,
        face_gate: Tensor | None,
        weights: dict[str, Tensor],
    ) -> Tensor:
        """Batched path used by the trainer.

        z (B, N, d_model); text (B, L_t, d_cond); audio_segments
        (B, frames, S, d_cond); image (B, L_i, d_cond); face_gate
        (B, N) 0/1 rows or None; weights maps modal -> (B,) tensor.
        """
        q = self.query(z)
        branches = {
            "text": self._global_branch(q, text, "text"),
            "image": self._global_branch(q, image, "image"),
            "audio": self._audio_branch(q, audio_segments),
        }
        if face_gate is not None:
            branches["audio"] = branches["audio"] * face_gate.unsqueeze(-1).to(z.dtype)
        out = torch.zeros_like(z)
        for modal in MODALS:
            out = out + weights[modal].reshape(-1, 1, 1) * branches[modal]
        return out


def flatten_face_gate(face_mask: FaceMask) -> Tensor:
    """Row-major (frame, row, col) flattening of a face mask to token gates."""
    return face_mask.values.reshape(-1)
