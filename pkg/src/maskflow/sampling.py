"""Flow-matching inference.

Euler integration of the learned velocity field from noise to video,
with three-arm guidance (unconditional, text, text+audio), a scheduled
negative prompt that replaces the unconditional text embedding early in
denoising, and overlapped sliding windows for clips longer than the
backbone's frame count. Everything is a pure function of the seed, the
conditions, and the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import Tensor

from .backbone import TAU_MAX, VideoBackbone
from .features import AudioEmbeddings, FaceMask, ModalBundle, TextEncoder, TextFeatures, segment_audio
from .masks import TaskKind, TaskMask, reimpose_known
from .pipeline import (
    PipelineConfig,
    PreparedClip,
    assemble_batch,
    bundle_for_task,
    stack_bundles,
    task_mask_for,
)

MOTION_NEGATIVE_PROMPT = "jerky warped gesture"
DETAIL_NEGATIVE_PROMPT = "blurry flicker banding"


@dataclass(frozen=True)
class NegativePromptSchedule:
    """Timestep-scheduled negative conditioning for the unconditional arm.

    High-noise steps blend toward the motion negative, low-noise steps
    toward the detail negative; the blend replaces the zero text
    embedding of the unconditional arm for the first few denoising
    steps only.
    """

    n_motion: Tensor  # (tokens, d_cond)
    n_detail: Tensor
    tau_split: float = 600.0
    w_early: float = 1.0
    w_late: float = 1.0
    first_steps: int = 3


def default_negative_schedule(encoder: TextEncoder) -> NegativePromptSchedule:
    return NegativePromptSchedule(
        n_motion=encoder.encode(MOTION_NEGATIVE_PROMPT).tokens,
        n_detail=encoder.encode(DETAIL_NEGATIVE_PROMPT).tokens,
    )


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 24
    s_text: float = 3.0
    s_audio: float = 9.0
    negative: NegativePromptSchedule | None = None
    window_frames: int = 4   # latent frames per generation window
    overlap: int = 0         # latent frames shared by consecutive windows
    s_overlap: float = 1.0   # guidance scale on the blended overlap term
    modal_scales: dict[str, float] | None = None  # per-modal attention rescale (ablations)

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 <= self.overlap < self.window_frames:
            raise ValueError("need 0 <= overlap < window_frames")


def compose_cfg(
    v_uncond: Tensor, v_text: Tensor, v_text_audio: Tensor, s_text: float, s_audio: float
) -> Tensor:
    """Sequential-difference guidance over the three condition arms.

    Reduces to plain CFG when one scale is 1 and keeps the two scales
    independent; all three differences vanish when the arms agree.
    """
    if not (v_uncond.shape == v_text.shape == v_text_audio.shape):
        raise ValueError("guidance arms must share a shape")
    return v_uncond + s_text * (v_text - v_uncond) + s_audio * (v_text_audio - v_text)


def _mix(a: Tensor, b: Tensor, w: float) -> Tensor:
    # w*a + (1-w)*b with bitwise-exact endpoints
    if w == 1.0:
        return a.clone()
    if w == 0.0:
        return b.clone()
    return w * a + (1.0 - w) * b


def png_negative(tau: float, schedule: NegativePromptSchedule) -> Tensor:
    """Negative embedding for timestep tau: motion-leaning early, detail-leaning late."""
    if tau >= schedule.tau_split:
        return _mix(schedule.n_motion, schedule.n_detail, schedule.w_early)
    return _mix(schedule.n_detail, schedule.n_motion, schedule.w_late)


def blend_weights(f: int, n: int) -> tuple[float, float]:
    """Overlap weights (window w, window w+1) for overlap frame f of n."""
    if f < 0 or f > n:
        raise ValueError(f"overlap index {f} outside [0, {n}]")
    if n == 0:
        return (1.0, 0.0)
    share = f / n
    return (1.0 - share, share)


def overlap_blend(v_w: Tensor, v_w1: Tensor, f: int, n: int) -> Tensor:
    """Linear hand-off between consecutive windows across the shared frames.

    Written in difference form so that equal inputs blend to themselves
    bitwise and the f = 0 / f = n endpoints return one window's
    prediction exactly.
    """
    if v_w.shape != v_w1.shape:
        raise ValueError("window velocities must share a shape")
    if f < 0 or f > n:
        raise ValueError(f"overlap index {f} outside [0, {n}]")
    if n == 0 or f == 0:
        return v_w.clone()
    if f == n:
        return v_w1.clone()
    return v_w + (f / n) * (v_w1 - v_w)


def long_video_cfg(
    v_w_cond: Tensor, v_w1_cond: Tensor, v_w_uncond: Tensor, f: int, n: int, s: float
) -> Tensor:
    """Guided velocity for overlap frame f between windows w and w+1.

    The unconditional term comes from window w only; the asymmetry is
    deliberate and kept as such.
    """
    blended = overlap_blend(v_w_cond, v_w1_cond, f, n)
    return v_w_cond + s * (blended - v_w_uncond)


def window_starts(total_frames: int, window: int, overlap: int) -> list[int]:
    stride = window - overlap
    if stride <= 0:
        raise ValueError("window stride must be positive")
    if total_frames < window:
        raise ValueError(f"total frames {total_frames} shorter than one window {window}")
    if (total_frames - window) % stride:
        raise ValueError(
            f"{total_frames} frames do not tile with window {window}, overlap {overlap}"
        )
    return list(range(0, total_frames - window + 1, stride))


def _fit_token_count(tokens: Tensor, count: int) -> Tensor:
    # batching the guidance arms needs equal token counts; zero rows are
    # the null-token convention everywhere else
    if tokens.shape[0] == count:
        return tokens
    if tokens.shape[0] > count:
        return tokens[:count]
    pad = torch.zeros(count - tokens.shape[0], tokens.shape[1], dtype=tokens.dtype)
    return torch.cat([tokens, pad], dim=0)


def _guidance_bundles(
    prep: PreparedClip, kind: TaskKind, negative_text: Tensor | None
) -> list[ModalBundle]:
    uncond = bundle_for_task(prep, kind, drop_text=True, drop_audio=True)
    if negative_text is not None:
        fitted = _fit_token_count(negative_text, uncond.text.tokens.shape[0])
        uncond = replace(uncond, text=TextFeatures(tokens=fitted))
    return [
        uncond,
        bundle_for_task(prep, kind, drop_audio=True),
        bundle_for_task(prep, kind),
    ]


def _arm_velocities(
    model: VideoBackbone,
    x: Tensor,
    prep: PreparedClip,
    mask: TaskMask,
    kind: TaskKind,
    tau: float,
    negative_text: Tensor | None,
    modal_scales: dict[str, float] | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """One batched forward for the three guidance arms at timestep tau."""
    bundles = _guidance_bundles(prep, kind, negative_text)
    text, audio, image = stack_bundles(bundles)
    noisy = x.unsqueeze(0).expand(3, *x.shape)
    reference = prep.latent.unsqueeze(0).expand(3, *prep.latent.shape)
    assembled = assemble_batch(noisy, reference, mask.values)
    gate = model._face_gate(prep.bundle)
    taus = torch.full((3,), float(tau))
    with torch.no_grad():
        v = model.forward_batch(
            assembled, text, audio, image, gate, taus, modal_scales=modal_scales
        )
    return v[0], v[1], v[2]


def _negative_text_for_step(cfg: SamplerConfig, step: int, tau: float) -> Tensor | None:
    sched = cfg.negative
    if sched is None or step >= sched.first_steps:
        return None
    return png_negative(tau, sched)


def euler_sample(
    model: VideoBackbone,
    prep: PreparedClip,
    kind: TaskKind,
    cfg: SamplerConfig,
    generator: torch.Generator | None = None,
    init: Tensor | None = None,
    mask: TaskMask | None = None,
) -> Tensor:
    """Integrate the velocity field from noise to a latent clip.

    Uniform Euler steps from t = 1 down to t = 0; after each step the
    given regions are pinned back to the reference.
    """
    if mask is None:
        mask = task_mask_for(kind, prep)
    reference = prep.latent
    x = torch.randn(reference.shape, generator=generator) if init is None else init.clone()
    dt = 1.0 / cfg.steps
    for step in range(cfg.steps):
        tau = (1.0 - step * dt) * TAU_MAX
        negative_text = _negative_text_for_step(cfg, step, tau)
        v_uncond, v_text, v_cond = _arm_velocities(
            model, x, prep, mask, kind, tau, negative_text, cfg.modal_scales
        )
        guided = compose_cfg(v_uncond, v_text, v_cond, cfg.s_text, cfg.s_audio)
        x = x - dt * guided
        if not torch.isfinite(x).all():
            raise RuntimeError(f"non-finite state at sampling step {step}")
        x = reimpose_known(x, reference, mask)
    return x


def _window_view(
    prep: PreparedClip, pcfg: PipelineConfig, start: int, window: int
) -> PreparedClip:
    """Slice of a long prepared clip covering latent frames [start, start+window)."""
    if prep.audio_features is None:
        raise ValueError("prepared clip lacks full-length audio features")
    base = prep.bundle
    run = pcfg.r * prep.audio_features.alpha
    span = prep.audio_features.features[start * run : (start + window) * run]
    audio = segment_audio(
        AudioEmbeddings(features=span, alpha=prep.audio_features.alpha),
        pcfg.r,
        pcfg.extend,
        window,
    )
    face = FaceMask(values=base.face_mask.values[start : start + window])
    bundle = ModalBundle(text=base.text, audio=audio, image=base.image, face_mask=face)
    return replace(
        prep,
        latent=prep.latent[start : start + window],
        bundle=bundle,
        t_video=window * pcfg.r,
        audio_features=None,
    )


def assemble_long_velocity(
    arms: list[tuple[Tensor, Tensor, Tensor]],
    starts: list[int],
    window: int,
    overlap: int,
    cfg: SamplerConfig,
    total_frames: int,
) -> Tensor:
    """Merge per-window (uncond, text, cond) velocities into one field.

    Frames owned by a single window take the three-arm composition;
    frames shared by windows w and w+1 take the blended hand-off, with
    the j-th shared frame at blend position f = j so the entry edge
    continues window w and the first frame past the overlap is pure
    window w+1.
    """
    frame_shape = arms[0][0].shape[1:]
    velocity = torch.zeros(total_frames, *frame_shape)
    for (v_uncond, v_text, v_cond), s in zip(arms, starts):
        velocity[s : s + window] = compose_cfg(
            v_uncond, v_text, v_cond, cfg.s_text, cfg.s_audio
        )
    for w in range(len(starts) - 1):
        s_next = starts[w + 1]
        for f in range(overlap):
            local_w = s_next + f - starts[w]
            velocity[s_next + f] = long_video_cfg(
                arms[w][2][local_w],
                arms[w + 1][2][f],
                arms[w][0][local_w],
                f,
                overlap,
                cfg.s_overlap,
            )
    return velocity


def sliding_window_generate(
    model: VideoBackbone,
    prep: PreparedClip,
    kind: TaskKind,
    cfg: SamplerConfig,
    pcfg: PipelineConfig,
    generator: torch.Generator | None = None,
    init: Tensor | None = None,
) -> Tensor:
    """Generate a clip longer than one window with overlapped joint denoising.

    All windows advance in lockstep each step: frames covered by a
    single window take the standard three-arm guidance, frames shared
    by two windows take the blended overlap guidance. With overlap 0
    the windows are denoised independently and concatenated.
    """
    window = cfg.window_frames
    if window != model.cfg.latent_frames:
        raise ValueError(
            f"window of {window} frames does not match backbone frames {model.cfg.latent_frames}"
        )
    total = prep.latent_frames
    starts = window_starts(total, window, cfg.overlap)
    mask = task_mask_for(kind, prep)
    views = [_window_view(prep, pcfg, s, window) for s in starts]
    window_masks = [
        TaskMask(values=mask.values[s : s + window], kind=kind) for s in starts
    ]
    reference = prep.latent
    x = torch.randn(reference.shape, generator=generator) if init is None else init.clone()
    dt = 1.0 / cfg.steps
    for step in range(cfg.steps):
        tau = (1.0 - step * dt) * TAU_MAX
        negative_text = _negative_text_for_step(cfg, step, tau)
        arms = [
            _arm_velocities(
                model, x[s : s + window], views[w], window_masks[w], kind, tau,
                negative_text, cfg.modal_scales,
            )
            for w, s in enumerate(starts)
        ]
        velocity = assemble_long_velocity(arms, starts, window, cfg.overlap, cfg, total)
        x = x - dt * velocity
        if not torch.isfinite(x).all():
            raise RuntimeError(f"non-finite state at sampling step {step}")
        x = reimpose_known(x, reference, mask)
    return x


def independent_window_generate(
    model: VideoBackbone,
    prep: PreparedClip,
    kind: TaskKind,
    cfg: SamplerConfig,
    pcfg: PipelineConfig,
    generator: torch.Generator | None = None,
    init: Tensor | None = None,
) -> Tensor:
    """Long clip with no blended hand-off: each window denoises alone.

    Windows still share one global init, but every window integrates its
    own slice in isolation and the earlier window keeps the overlapped
    frames, so the first fresh frame of each later window lands as a
    hard cut. Baseline for measuring what the overlap blending buys.
    """
    window = cfg.window_frames
    if window != model.cfg.latent_frames:
        raise ValueError(
            f"window of {window} frames does not match backbone frames {model.cfg.latent_frames}"
        )
    total = prep.latent_frames
    starts = window_starts(total, window, cfg.overlap)
    mask = task_mask_for(kind, prep)
    x_init = (
        torch.randn(prep.latent.shape, generator=generator) if init is None else init.clone()
    )
    out = torch.zeros_like(prep.latent)
    for w, s in enumerate(starts):
        view = _window_view(prep, pcfg, s, window)
        window_mask = TaskMask(values=mask.values[s : s + window], kind=kind)
        latent = euler_sample(
            model, view, kind, cfg, init=x_init[s : s + window], mask=window_mask
        )
        keep_from = 0 if w == 0 else cfg.overlap
        out[s + keep_from : s + window] = latent[keep_from:]
    return out


def mining_sampler(cfg: SamplerConfig):
    """Adapter with the (model, prep, kind, generator) shape negative mining expects."""

    def sample(model, prep, kind, generator):
        return euler_sample(model, prep, kind, cfg, generator=generator)

    return sample
