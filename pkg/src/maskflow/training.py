"""Staged multi-task training with negative-rejection phases.

The run is a sequence of stages. Each stage supervises flow matching on
a growing task set (hardest conditioning first by default), optionally
followed by a negative phase that pushes the model away from tagged bad
samples, with a guard that stops the phase if positive-set loss
degrades. A parameter soup is maintained by exponential moving average
merges every ``ema_every`` steps and at stage boundaries. Every random
draw comes from a named stream so a checkpoint restores the exact
trajectory.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from .backbone import TAU_MAX, BackboneConfig, VideoBackbone, flow_matching_loss
from .checkpoint import (
    Checkpoint,
    RandomStreams,
    derive_seed,
    load_checkpoint,
    pack_state_dict,
    save_checkpoint,
    unpack_state_dict,
)
from .data import SyntheticClip, inject_artifact
from .features import AudioSegments, ModalBundle
from .masks import TaskKind, TaskMask
from .phase_weights import PhaseWeightConfig
from .pipeline import (
    PipelineConfig,
    PreparedClip,
    assemble_batch,
    bundle_for_task,
    encode_clip,
    face_gate_tokens,
    latent_to_pixels,
    stack_bundles,
    task_mask_for,
)



@dataclass(frozen=True)
class StageSpec:
    tasks: tuple[TaskKind, ...]
    sft_steps: int
    ndpo_steps: int = 0


@dataclass(frozen=True)
class TrainPlan:
    """Full schedule: stages, optimizer, souping, and negative-phase knobs."""

    stages: tuple[StageSpec, ...]
    lr: float = 1e-4
    ndpo_lr: float = 1e-4
    batch_size: int = 4
    ema_beta: float = 0.9
    ema_every: int = 100
    use_ema: bool = True
    ndpo_lambda: float = 1.0
    guard_ratio: float = 0.10
    drop_text_prob: float = 0.1
    drop_audio_prob: float = 0.1
    loss_full_region: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("plan needs at least one stage")
        for stage in self.stages:
            if not stage.tasks:
                raise ValueError("every stage needs a task set")
            if stage.sft_steps < 0 or stage.ndpo_steps < 0:
                raise ValueError("step counts must be non-negative")
        for earlier, later in zip(self.stages, self.stages[1:]):
            if not set(earlier.tasks) <= set(later.tasks):
                raise ValueError("stage task sets must be nested (each a superset of the last)")
        if not (0.0 <= self.ema_beta <= 1.0):
            raise ValueError("ema_beta must be in [0, 1]")
        if self.ndpo_lambda <= 0:
            raise ValueError("ndpo_lambda must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def default_stages(sft_steps: int, ndpo_steps: int = 0) -> tuple[StageSpec, ...]:
    """Hard-to-easy introduction: heavy-mask tasks first, lip sync last."""
    return (
        StageSpec((TaskKind.I2V, TaskKind.FLF2V), sft_steps, ndpo_steps),
        StageSpec((TaskKind.I2V, TaskKind.FLF2V, TaskKind.T2V), sft_steps, ndpo_steps),
        StageSpec(
            (TaskKind.I2V, TaskKind.FLF2V, TaskKind.T2V, TaskKind.LIP_SYNC),
            sft_steps,
            ndpo_steps,
        ),
    )


def easy_to_hard_stages(sft_steps: int, ndpo_steps: int = 0) -> tuple[StageSpec, ...]:
    """Reversed introduction order (ablation arm)."""
    return (
        StageSpec((TaskKind.LIP_SYNC,), sft_steps, ndpo_steps),
        StageSpec((TaskKind.LIP_SYNC, TaskKind.T2V), sft_steps, ndpo_steps),
        StageSpec(
            (TaskKind.LIP_SYNC, TaskKind.T2V, TaskKind.FLF2V, TaskKind.I2V),
            sft_steps,
            ndpo_steps,
        ),
    )


def uniform_stages(total_steps: int, ndpo_steps: int = 0) -> tuple[StageSpec, ...]:
    """Single stage sampling all tasks uniformly from the start (ablation arm)."""
    return (
        StageSpec(
            (TaskKind.I2V, TaskKind.FLF2V, TaskKind.T2V, TaskKind.LIP_SYNC),
            total_steps,
            ndpo_steps,
        ),
    )


@dataclass
class NegativeSample:
    """A rejected clip and the conditions it was produced under."""

    latent: Tensor
    bundle: ModalBundle
    mask: TaskMask
    issue: str


def build_model(
    cfg: BackboneConfig, phase_cfg: PhaseWeightConfig | None = None, seed: int = 0
) -> VideoBackbone:
    model = VideoBackbone(cfg, phase_cfg)
    model.reset_parameters(torch.Generator().manual_seed(derive_seed(seed, "init")))
    return model


def ema_soup(
    soup: dict[str, Tensor], task_params: dict[str, Tensor], beta: float
) -> dict[str, Tensor]:
    """Elementwise beta*soup + (1-beta)*task merge of two parameter sets."""
    if set(soup) != set(task_params):
        raise ValueError("parameter sets have different keys")
    merged = {}
    for key, old in soup.items():
        new = task_params[key]
        if old.shape != new.shape:
            raise ValueError(f"shape mismatch at {key}: {old.shape} vs {new.shape}")
        if beta == 1.0:
            merged[key] = old.clone()
        elif beta == 0.0:
            merged[key] = new.detach().clone()
        else:
            merged[key] = beta * old + (1.0 - beta) * new.detach()
    return merged


def _batch_tensors(
    batch: list[PreparedClip], kind: TaskKind, model: VideoBackbone,
    drop_text: list[bool] | None = None, drop_audio: list[bool] | None = None,
) -> tuple[Tensor, TaskMask, Tensor, Tensor, Tensor, Tensor]:
    drop_text = drop_text or [False] * len(batch)
    drop_audio = drop_audio or [False] * len(batch)
    mask = task_mask_for(kind, batch[0])
    bundles = [
        bundle_for_task(p, kind, drop_text=dt, drop_audio=da)
        for p, dt, da in zip(batch, drop_text, drop_audio)
    ]
    text, audio, image = stack_bundles(bundles)
    gates = torch.stack(
        [face_gate_tokens(b.face_mask, model.cfg.patch) for b in bundles]
    )
    x0 = torch.stack([p.latent for p in batch])
    return x0, mask, text, audio, image, gates


def sft_step(
    model: VideoBackbone,
    optimizer: torch.optim.Optimizer,
    batch: list[PreparedClip],
    kind: TaskKind,
    streams: RandomStreams,
    plan: TrainPlan,
) -> float:
    """One gradient step of masked flow matching on a same-task batch."""
    bsz = len(batch)
    g_drop = streams.get("dropout")
    drops = torch.rand(bsz, 2, generator=g_drop)
    drop_text = (drops[:, 0] < plan.drop_text_prob).tolist()
    drop_audio = (drops[:, 1] < plan.drop_audio_prob).tolist()
    x0, mask, text, audio, image, gates = _batch_tensors(
        batch, kind, model, drop_text, drop_audio
    )
    tau = torch.rand(bsz, generator=streams.get("timestep")) * TAU_MAX
    eps = torch.randn(x0.shape, generator=streams.get("noise"))
    t = (tau / TAU_MAX).reshape(-1, 1, 1, 1, 1)
    x_t = (1.0 - t) * x0 + t * eps
    x_in = assemble_batch(x_t, x0, mask.values)
    v_hat = model.forward_batch(x_in, text, audio, image, gates, tau)
    loss = flow_matching_loss(v_hat, x0, eps, mask, masked_only=not plan.loss_full_region)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise RuntimeError(f"non-finite training loss {value} on task {kind.value}")
    loss.backward()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return value


def _negative_batch_tensors(
    negatives: list[NegativeSample], model: VideoBackbone
) -> tuple[Tensor, TaskMask, Tensor, Tensor, Tensor, Tensor]:
    mask = negatives[0].mask
    for neg in negatives[1:]:
        if not torch.equal(neg.mask.values, mask.values):
            raise ValueError("negative batches must share one mask pattern")
    text, audio, image = stack_bundles([n.bundle for n in negatives])
    gates = torch.stack(
        [face_gate_tokens(n.bundle.face_mask, model.cfg.patch) for n in negatives]
    )
    x0 = torch.stack([n.latent for n in negatives])
    return x0, mask, text, audio, image, gates


def negative_flow_distances(
    model: VideoBackbone,
    negatives: list[NegativeSample],
    tau: Tensor,
    eps: Tensor,
) -> Tensor:
    """Per-sample masked flow error of the model on negative samples."""
    if not negatives:
        raise ValueError("empty negative batch")
    x0, mask, text, audio, image, gates = _negative_batch_tensors(negatives, model)
    t = (tau / TAU_MAX).reshape(-1, 1, 1, 1, 1)
    x_t = (1.0 - t) * x0 + t * eps
    x_in = assemble_batch(x_t, x0, mask.values)
    v_hat = model.forward_batch(x_in, text, audio, image, gates, tau)
    err = (v_hat - (eps - x0)) ** 2
    m = mask.values.to(err.dtype)
    per = (err * m).flatten(1).sum(dim=1)
    denom = m.sum() * x0.shape[2]
    return per / denom


def rejection_loss_from_distances(distances: Tensor, lam: float = 1.0) -> Tensor:
    """Mean log(1 + pi) with pi = exp(-d / lam).

    Equals softplus(-d / lam), so the value at d = 0, lam = 1 is ln 2
    and the gradient in d is -sigmoid(-d / lam) / lam. Strictly
    decreasing in d and vanishing as d grows, it rewards the model for
    assigning negatives a large flow error without ever rewarding them.
    """
    if lam <= 0:
        raise ValueError("temperature must be positive")
    return F.softplus(-distances / lam).mean()


def ndpo_loss(
    model: VideoBackbone,
    negatives: list[NegativeSample],
    lam: float = 1.0,
    tau: Tensor | None = None,
    eps: Tensor | None = None,
    streams: RandomStreams | None = None,
) -> Tensor:
    """Rejection loss over a batch of negatives at sampled timesteps.

    Minimizing drives the probability proxy pi of reproducing each
    negative toward zero.
    """
    if lam <= 0:
        raise ValueError("temperature must be positive")
    if not negatives:
        raise ValueError("empty negative batch")
    bsz = len(negatives)
    if tau is None:
        if streams is None:
            raise ValueError("need explicit tau/eps or random streams")
        tau = torch.rand(bsz, generator=streams.get("neg_timestep")) * TAU_MAX
    if eps is None:
        shape = (bsz, *negatives[0].latent.shape)
        eps = torch.randn(shape, generator=streams.get("neg_noise"))
    d = negative_flow_distances(model, negatives, tau, eps)
    return rejection_loss_from_distances(d, lam)


def paired_dpo_loss(
    model: VideoBackbone,
    positives: list[NegativeSample],
    negatives: list[NegativeSample],
    lam: float = 1.0,
    tau: Tensor | None = None,
    eps: Tensor | None = None,
    streams: RandomStreams | None = None,
) -> Tensor:
    """Paired-preference baseline: softplus((d_pos - d_neg) / lam), meaned.

    Each positive is compared against its matched negative at a shared
    timestep and noise draw, so the loss pushes the preferred clip's flow
    error below the rejected clip's. Unlike the rejection-only loss this
    needs the preferred counterpart for every negative.
    """
    if lam <= 0:
        raise ValueError("temperature must be positive")
    if not positives or len(positives) != len(negatives):
        raise ValueError("need matched positive/negative pairs")
    bsz = len(positives)
    if tau is None:
        if streams is None:
            raise ValueError("need explicit tau/eps or random streams")
        tau = torch.rand(bsz, generator=streams.get("neg_timestep")) * TAU_MAX
    if eps is None:
        shape = (bsz, *positives[0].latent.shape)
        eps = torch.randn(shape, generator=streams.get("neg_noise"))
    d_pos = negative_flow_distances(model, positives, tau, eps)
    d_neg = negative_flow_distances(model, negatives, tau, eps)
    return F.softplus((d_pos - d_neg) / lam).mean()


PROBE_TAUS = (125.0, 375.0, 625.0, 875.0)


def negative_probe(
    model: VideoBackbone,
    negatives: list[NegativeSample],
    lam: float = 1.0,
    probe_seed: int = 0,
    taus: tuple[float, ...] = PROBE_TAUS,
) -> float:
    """Deterministic mean probability proxy over a negative set."""
    if not negatives:
        raise ValueError("empty negative set")
    values = []
    with torch.no_grad():
        for tau_value in taus:
            g = torch.Generator().manual_seed(derive_seed(probe_seed, f"neg-probe:{tau_value}"))
            shape = (len(negatives), *negatives[0].latent.shape)
            eps = torch.randn(shape, generator=g)
            tau = torch.full((len(negatives),), tau_value)
            d = negative_flow_distances(model, negatives, tau, eps)
            values.append(torch.exp(-d / lam))
    return float(torch.cat(values).mean())


def evaluate_task_losses(
    model: VideoBackbone,
    samples: list[PreparedClip],
    tasks: tuple[TaskKind, ...],
    probe_seed: int = 0,
    probe_size: int = 8,
    taus: tuple[float, ...] = PROBE_TAUS,
) -> dict[TaskKind, float]:
    """Deterministic per-task flow loss on a fixed probe batch and tau grid."""
    batch = samples[: min(probe_size, len(samples))]
    out: dict[TaskKind, float] = {}
    with torch.no_grad():
        for kind in tasks:
            x0, mask, text, audio, image, gates = _batch_tensors(batch, kind, model)
            total = 0.0
            for tau_value in taus:
                g = torch.Generator().manual_seed(
                    derive_seed(probe_seed, f"probe:{kind.value}:{tau_value}")
                )
                eps = torch.randn(x0.shape, generator=g)
                tau = torch.full((len(batch),), tau_value)
                t = (tau / TAU_MAX).reshape(-1, 1, 1, 1, 1)
                x_in = assemble_batch((1.0 - t) * x0 + t * eps, x0, mask.values)
                v_hat = model.forward_batch(x_in, text, audio, image, gates, tau)
                total += float(flow_matching_loss(v_hat, x0, eps, mask))
            out[kind] = total / len(taus)
    return out


def mine_negatives(
    model: VideoBackbone,
    sampler,
    prepared: list[PreparedClip],
    clips: list[SyntheticClip],
    n: int,
    oracle,
    streams: RandomStreams,
    pcfg: PipelineConfig,
    kind: TaskKind = TaskKind.I2V,
) -> list[NegativeSample]:
    """Generate n clips with the frozen model; keep those the oracle rejects.

    ``sampler`` is sampler(model, prepared_clip, kind, generator) -> latent;
    ``oracle`` maps a pixel clip to an issue tag or None.
    """
    g = streams.get("mine")
    negatives = []
    with torch.no_grad():
        for _ in range(n):
            idx = int(torch.randint(len(prepared), (1,), generator=g))
            latent = sampler(model, prepared[idx], kind, g)
            pixels = latent_to_pixels(latent, pcfg.r)
            tag = oracle(replace(clips[idx], pixels=pixels, issue=None))
            if tag is not None:
                negatives.append(
                    NegativeSample(
                        latent=latent.detach().clone(),
                        bundle=bundle_for_task(prepared[idx], kind),
                        mask=task_mask_for(kind, prepared[idx]),
                        issue=tag,
                    )
                )
    return negatives


def dominant_issue_filter(negatives: list[NegativeSample]) -> list[NegativeSample]:
    """Keep only the most frequent issue tag; each phase targets one defect.

    Ties break toward the lexicographically smallest tag so the choice is
    reproducible across runs.
    """
    if not negatives:
        return []
    counts = Counter(n.issue for n in negatives)
    top = max(counts.values())
    dominant = min(tag for tag, c in counts.items() if c == top)
    return [n for n in negatives if n.issue == dominant]


def injected_negative_set(
    clips: list[SyntheticClip],
    pcfg: PipelineConfig,
    kinds: tuple[str, ...] = ("color_shift", "identity_swap"),
    seed: int = 0,
    task: TaskKind = TaskKind.I2V,
    text_encoder=None,
) -> list[NegativeSample]:
    """Artifact-injected ground-truth clips encoded as negative samples."""
    negatives = []
    for i, clip in enumerate(clips):
        kind = kinds[i % len(kinds)]
        bad = inject_artifact(clip, kind, seed=derive_seed(seed, f"inject:{i}"))
        prepared = encode_clip(bad, pcfg, text_encoder=text_encoder)
        negatives.append(
            NegativeSample(
                latent=prepared.latent,
                bundle=bundle_for_task(prepared, task),
                mask=task_mask_for(task, prepared),
                issue=kind,
            )
        )
    return negatives


def plan_to_dict(plan: TrainPlan) -> dict:
    return {
        "stages": [
            {
                "tasks": [t.value for t in stage.tasks],
                "sft_steps": stage.sft_steps,
                "ndpo_steps": stage.ndpo_steps,
            }
            for stage in plan.stages
        ],
        "lr": plan.lr,
        "ndpo_lr": plan.ndpo_lr,
        "batch_size": plan.batch_size,
        "ema_beta": plan.ema_beta,
        "ema_every": plan.ema_every,
        "use_ema": plan.use_ema,
        "ndpo_lambda": plan.ndpo_lambda,
        "guard_ratio": plan.guard_ratio,
        "drop_text_prob": plan.drop_text_prob,
        "drop_audio_prob": plan.drop_audio_prob,
        "loss_full_region": plan.loss_full_region,
        "seed": plan.seed,
    }


def plan_from_dict(raw: dict) -> TrainPlan:
    stages = tuple(
        StageSpec(
            tasks=tuple(TaskKind(t) for t in item["tasks"]),
            sft_steps=int(item["sft_steps"]),
            ndpo_steps=int(item.get("ndpo_steps", 0)),
        )
        for item in raw["stages"]
    )
    return TrainPlan(
        stages=stages,
        lr=float(raw["lr"]),
        ndpo_lr=float(raw["ndpo_lr"]),
        batch_size=int(raw["batch_size"]),
        ema_beta=float(raw["ema_beta"]),
        ema_every=int(raw["ema_every"]),
        use_ema=bool(raw["use_ema"]),
        ndpo_lambda=float(raw["ndpo_lambda"]),
        guard_ratio=float(raw["guard_ratio"]),
        drop_text_prob=float(raw["drop_text_prob"]),
        drop_audio_prob=float(raw["drop_audio_prob"]),
        loss_full_region=bool(raw.get("loss_full_region", False)),
        seed=int(raw["seed"]),
    )


class Trainer:
    """Owns model, optimizer, soup, and random streams for one run.

    All loop counters live on the instance, so a checkpoint taken at any
    step restores the exact remaining trajectory.
    """

    def __init__(
        self,
        model: VideoBackbone,
        plan: TrainPlan,
        samples: list[PreparedClip],
        config_digest: str = "",
        log_path: str | Path | None = None,
    ) -> None:
        plan.validate()
        if not samples:
            raise ValueError("no training samples")
        self.model = model
        self.plan = plan
        self.samples = samples
        self.config_digest = config_digest
        self.log_path = Path(log_path) if log_path else None
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=plan.lr)
        self.streams = RandomStreams(plan.seed)
        self.soup = (
            {k: v.detach().clone() for k, v in model.state_dict().items()}
            if plan.use_ema
            else None
        )
        self.stage_idx = 0
        self.phase = "sft"
        self.phase_step = 0
        self.global_step = 0
        self.history: list[dict] = []
        self.sft_losses: list[float] = []
        self._negatives: list[NegativeSample] | None = None
        self._phase_probe_start: float | None = None
        self._save_at: int | None = None
        self._save_path: str | Path | None = None

    # -- logging -------------------------------------------------------

    def _log(self, kind: str, task: str, value: float) -> None:
        record = {
            "step": self.global_step,
            "stage": self.stage_idx,
            "task": task,
            "kind": kind,
            "value": value,
        }
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if kind == "sft_flow":
            self.sft_losses.append(value)

    def _event(self, name: str, **extra) -> None:
        self.history.append({"event": name, "step": self.global_step, **extra})

    def _maybe_save(self) -> None:
        if self._save_at is not None and self.global_step == self._save_at and self._save_path:
            self.save(self._save_path)

    # -- phases --------------------------------------------------------

    def _sft_one(self, stage: StageSpec) -> None:
        pick = int(torch.randint(len(stage.tasks), (1,), generator=self.streams.get("task")))
        kind = stage.tasks[pick]
        idx = torch.randint(
            len(self.samples), (self.plan.batch_size,), generator=self.streams.get("batch")
        )
        batch = [self.samples[i] for i in idx.tolist()]
        value = sft_step(self.model, self.optimizer, batch, kind, self.streams, self.plan)
        self.phase_step += 1
        self.global_step += 1
        self._log("sft_flow", kind.value, value)
        if (
            self.soup is not None
            and self.plan.ema_every > 0
            and self.global_step % self.plan.ema_every == 0
        ):
            self._merge_soup("periodic")
        self._maybe_save()

    def _positive_probe(self, stage: StageSpec) -> float:
        losses = evaluate_task_losses(
            self.model, self.samples, stage.tasks, probe_seed=self.plan.seed
        )
        return sum(losses.values()) / len(losses)

    def _run_ndpo(self, stage: StageSpec, provider) -> None:
        import copy

        plan = self.plan
        if self._negatives is None:
            if provider is None:
                raise ValueError("stage defines NDPO steps but no negatives provider given")
            mined = list(provider(self.stage_idx, self.model))
            self._negatives = dominant_issue_filter(mined)
            self._phase_probe_start = self._positive_probe(stage)
            self._event(
                "ndpo_phase_start",
                count=len(self._negatives),
                mined=len(mined),
                issue=self._negatives[0].issue if self._negatives else None,
                positive_probe=self._phase_probe_start,
                pi=(
                    negative_probe(self.model, self._negatives, plan.ndpo_lambda)
                    if self._negatives
                    else None
                ),
            )
        if not self._negatives:
            self._event("ndpo_phase_end", reason="no_negatives")
            self._negatives = None
            self._phase_probe_start = None
            return
        for group in self.optimizer.param_groups:
            group["lr"] = plan.ndpo_lr
        try:
            while self.phase_step < stage.ndpo_steps:
                param_backup = {
                    k: v.detach().clone() for k, v in self.model.state_dict().items()
                }
                opt_backup = copy.deepcopy(self.optimizer.state_dict())
                loss = ndpo_loss(
                    self.model, self._negatives, plan.ndpo_lambda, streams=self.streams
                )
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise RuntimeError("non-finite negative-phase loss")
                loss.backward()
                self.optimizer.step()
                self.optimizer.zero_grad(set_to_none=True)
                self.phase_step += 1
                self.global_step += 1
                self._log("ndpo", "-", value)
                probe = self._positive_probe(stage)
                self._log("probe_positive", "-", probe)
                if probe > (1.0 + plan.guard_ratio) * self._phase_probe_start:
                    self.model.load_state_dict(param_backup)
                    self.optimizer.load_state_dict(opt_backup)
                    self._event(
                        "ndpo_guard_abort",
                        probe=probe,
                        phase_start=self._phase_probe_start,
                    )
                    break
                self._maybe_save()
        finally:
            for group in self.optimizer.param_groups:
                group["lr"] = plan.lr
        self._event(
            "ndpo_phase_end",
            pi=negative_probe(self.model, self._negatives, plan.ndpo_lambda),
            positive_probe=self._positive_probe(stage),
            positive_grad_steps=0,
        )
        self._negatives = None
        self._phase_probe_start = None

    def _merge_soup(self, reason: str) -> None:
        if self.soup is None:
            return
        self.soup = ema_soup(self.soup, self.model.state_dict(), self.plan.ema_beta)
        self._event("ema_merge", reason=reason)

    # -- main loop -----------------------------------------------------

    def run(
        self,
        negatives_provider=None,
        save_at: int | None = None,
        save_path: str | Path | None = None,
    ) -> "Trainer":
        """Execute (or continue) the plan; optionally checkpoint mid-run."""
        self._save_at = save_at
        self._save_path = save_path
        stages = self.plan.stages
        while self.stage_idx < len(stages):
            stage = stages[self.stage_idx]
            if self.phase == "sft":
                if self.phase_step == 0:
                    self._event(
                        "stage_start",
                        stage=self.stage_idx,
                        tasks=[t.value for t in stage.tasks],
                    )
                while self.phase_step < stage.sft_steps:
                    self._sft_one(stage)
                self.phase = "ndpo"
                self.phase_step = 0
            if self.phase == "ndpo":
                if stage.ndpo_steps > 0:
                    self._run_ndpo(stage, negatives_provider)
                self.phase = "merge"
                self.phase_step = 0
            if self.phase == "merge":
                self._merge_soup("stage_boundary")
                self._event("stage_end", stage=self.stage_idx)
                self.stage_idx += 1
                self.phase = "sft"
                self.phase_step = 0
        return self

    # -- persistence ---------------------------------------------------

    def save(self, path: str | Path) -> None:
        tensors: dict[str, Tensor] = {}
        tensors.update(
            pack_state_dict(
                "model", {k: v.detach().cpu() for k, v in self.model.state_dict().items()}
            )
        )
        if self.soup is not None:
            tensors.update(pack_state_dict("soup", self.soup))
        opt_state = self.optimizer.state_dict()
        scalars: dict[str, float] = {}
        for pid, state in opt_state["state"].items():
            for key, val in state.items():
                if torch.is_tensor(val):
                    tensors[f"opt.{pid}.{key}"] = val.detach().cpu()
                else:
                    scalars[f"{pid}.{key}"] = val
        negatives_meta = []
        if self._negatives:
            for i, neg in enumerate(self._negatives):
                tensors[f"neg.{i}.latent"] = neg.latent
                tensors[f"neg.{i}.text"] = neg.bundle.text.tokens
                tensors[f"neg.{i}.audio"] = neg.bundle.audio.segments
                tensors[f"neg.{i}.image"] = neg.bundle.image.tokens
                tensors[f"neg.{i}.face"] = neg.bundle.face_mask.values
                tensors[f"neg.{i}.mask"] = neg.mask.values
                negatives_meta.append(
                    {
                        "issue": neg.issue,
                        "kind": neg.mask.kind.value,
                        "r": neg.bundle.audio.r,
                        "e": neg.bundle.audio.e,
                    }
                )
        meta = {
            "format": "training-run",
            "config_digest": self.config_digest,
            "stage_idx": self.stage_idx,
            "phase": self.phase,
            "phase_step": self.phase_step,
            "global_step": self.global_step,
            "plan": plan_to_dict(self.plan),
            "history": self.history,
            "optimizer_groups": opt_state["param_groups"],
            "optimizer_scalars": scalars,
            "negatives": negatives_meta,
            "phase_probe_start": self._phase_probe_start,
            "use_soup": self.soup is not None,
        }
        save_checkpoint(
            Checkpoint(tensors=tensors, meta=meta, rng_states=self.streams.state_bytes()),
            path,
        )

    @classmethod
    def resume(
        cls,
        path: str | Path,
        model: VideoBackbone,
        samples: list[PreparedClip],
        log_path: str | Path | None = None,
    ) -> "Trainer":
        from .features import FaceMask, ImageFeatures, TextFeatures

        ckpt = load_checkpoint(path)
        meta = ckpt.meta
        plan = plan_from_dict(meta["plan"])
        trainer = cls(
            model, plan, samples, config_digest=meta["config_digest"], log_path=log_path
        )
        model.load_state_dict(unpack_state_dict("model", ckpt.tensors))
        trainer.soup = (
            unpack_state_dict("soup", ckpt.tensors) if meta.get("use_soup") else None
        )
        state: dict[int, dict] = {}
        for key, tensor in ckpt.tensors.items():
            if key.startswith("opt."):
                _, pid, name = key.split(".", 2)
                state.setdefault(int(pid), {})[name] = tensor
        for flat, val in meta.get("optimizer_scalars", {}).items():
            pid, name = flat.split(".", 1)
            state.setdefault(int(pid), {})[name] = val
        if state:
            trainer.optimizer.load_state_dict(
                {"state": state, "param_groups": meta["optimizer_groups"]}
            )
        trainer.stage_idx = int(meta["stage_idx"])
        trainer.phase = meta["phase"]
        trainer.phase_step = int(meta["phase_step"])
        trainer.global_step = int(meta["global_step"])
        trainer.history = list(meta["history"])
        trainer.streams.load_state_bytes(ckpt.rng_states)
        trainer._phase_probe_start = meta.get("phase_probe_start")
        negatives = []
        for i, info in enumerate(meta.get("negatives", [])):
            bundle = ModalBundle(
                text=TextFeatures(tokens=ckpt.tensors[f"neg.{i}.text"]),
                audio=AudioSegments(
                    segments=ckpt.tensors[f"neg.{i}.audio"], r=info["r"], e=info["e"]
                ),
                image=ImageFeatures(tokens=ckpt.tensors[f"neg.{i}.image"]),
                face_mask=FaceMask(values=ckpt.tensors[f"neg.{i}.face"]),
            )
            negatives.append(
                NegativeSample(
                    latent=ckpt.tensors[f"neg.{i}.latent"],
                    bundle=bundle,
                    mask=TaskMask(
                        values=ckpt.tensors[f"neg.{i}.mask"], kind=TaskKind(info["kind"])
                    ),
                    issue=info["issue"],
                )
            )
        trainer._negatives = negatives or None
        return trainer
