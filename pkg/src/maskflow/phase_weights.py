"""Timestep-phase weight law for the modal expert branches.

Each condition modality (text, image, audio) gets a scalar weight that
depends on the diffusion timestep tau in [0, 1000], where tau = 1000 is
pure noise (the earliest denoising phase). The law is piecewise linear
per modality: w_floor below the left knot b1, w_ceil at or above the
right knot b2, and a continuous linear ramp in between. High-tau
weights therefore control how strongly a modality speaks early in
denoising.
"""

from __future__ import annotations

from dataclasses import dataclass, field

MODALS = ("text", "image", "audio")

TAU_MAX = 1000.0


@dataclass(frozen=True)
class ModalKnots:
    """Left/right critical timesteps bounding the linear ramp."""

    b1: float
    b2: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.b1 <= self.b2 <= TAU_MAX):
            raise ValueError(f"knots must satisfy 0 <= b1 <= b2 <= {TAU_MAX}, got {self}")


@dataclass(frozen=True)
class PhaseWeightConfig:
    """Per-modal knots plus the shared floor/ceiling of the weight law.

    Defaults keep text at full weight throughout, ramp image up over the
    early-middle phases, and ramp audio up only in the earliest phase.
    """

    text: ModalKnots = field(default_factory=lambda: ModalKnots(0.0, 0.0))
    image: ModalKnots = field(default_factory=lambda: ModalKnots(100.0, 400.0))
    audio: ModalKnots = field(default_factory=lambda: ModalKnots(400.0, 700.0))
    w_floor: float = 0.5
    w_ceil: float = 1.0

    def __post_init__(self) -> None:
        if self.w_floor > self.w_ceil:
            raise ValueError(f"w_floor {self.w_floor} > w_ceil {self.w_ceil}")

    def knots(self, modal: str) -> ModalKnots:
        if modal not in MODALS:
            raise ValueError(f"unknown modal {modal!r}, expected one of {MODALS}")
        return getattr(self, modal)


def modal_weight(modal: str, tau: float, cfg: PhaseWeightConfig) -> float:
    """Evaluate the three-branch weight law for one modality at tau."""
    if not (0.0 <= tau <= TAU_MAX):
        raise ValueError(f"tau {tau} outside [0, {TAU_MAX}]")
    k = cfg.knots(modal)
    if tau < k.b1:
        return cfg.w_floor
    if tau >= k.b2:
        return cfg.w_ceil
    # b1 <= tau < b2 implies b1 < b2, so the ramp is well defined; the
    # w_floor + span*frac form is exact at tau = b1.
    frac = (tau - k.b1) / (k.b2 - k.b1)
    return cfg.w_floor + (cfg.w_ceil - cfg.w_floor) * frac


def weights_all(tau: float, cfg: PhaseWeightConfig) -> dict[str, float]:
    """Weights for every modality at one timestep."""
    return {modal: modal_weight(modal, tau, cfg) for modal in MODALS}


def weights_all_tensor(tau, cfg: PhaseWeightConfig) -> dict:
    """Vectorized weight law over a batch of timesteps (torch tensor in/out).

    Matches :func:`modal_weight` elementwise; used on the batched
    training path.
    """
    import torch

    tau = torch.as_tensor(tau, dtype=torch.get_default_dtype())
    if bool((tau < 0).any()) or bool((tau > TAU_MAX).any()):
        raise ValueError("tau outside [0, 1000]")
    out = {}
    span = cfg.w_ceil - cfg.w_floor
    for modal in MODALS:
        k = cfg.knots(modal)
        floor_t = torch.full_like(tau, cfg.w_floor)
        ceil_t = torch.full_like(tau, cfg.w_ceil)
        if k.b2 > k.b1:
            frac = ((tau - k.b1) / (k.b2 - k.b1)).clamp(0.0, 1.0)
            ramp = cfg.w_floor + span * frac
            w = torch.where(tau >= k.b2, ceil_t, torch.where(tau < k.b1, floor_t, ramp))
        else:
            w = torch.where(tau >= k.b2, ceil_t, floor_t)
        out[modal] = w
    return out
