import pytest
import torch

from maskflow.backbone import BackboneConfig
from maskflow.data import gen_dataset
from maskflow.masks import TaskKind, TaskMask, reimpose_known
from maskflow.phase_weights import PhaseWeightConfig
from maskflow.pipeline import PipelineConfig, encode_clip, make_text_encoder, task_mask_for
from maskflow.sampling import (
    NegativePromptSchedule,
    SamplerConfig,
    assemble_long_velocity,
    blend_weights,
    compose_cfg,
    default_negative_schedule,
    euler_sample,
    independent_window_generate,
    long_video_cfg,
    mining_sampler,
    overlap_blend,
    png_negative,
    sliding_window_generate,
    window_starts,
)
from maskflow.training import build_model

SMALL = BackboneConfig(
    depth=2, d_model=32, patch=4, latent_frames=4, channels=3,
    height=32, width=32, heads=2, d_cond=64, mlp_ratio=2,
)


def prep_clip(t_video=8, seed=0):
    pcfg = PipelineConfig()
    enc = make_text_encoder(pcfg)
    clip = gen_dataset(1, t_video=t_video, seed=seed)[0]
    return pcfg, enc, clip, encode_clip(clip, pcfg, text_encoder=enc)


class ConstantVelocityModel:
    """Stand-in denoiser that predicts the same velocity everywhere."""

    def __init__(self, template, value):
        self.cfg = template.cfg
        self._template = template
        self._value = value

    def _face_gate(self, bundle):
        return self._template._face_gate(bundle)

    def forward_batch(self, x, text, audio, image, gate, tau, modal_scales=None):
        b, f = x.shape[0], x.shape[1]
        return torch.full((b, f, self.cfg.channels, x.shape[-2], x.shape[-1]), self._value)


def test_sampler_config_validation():
    SamplerConfig(steps=1)
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(window_frames=4, overlap=4)
    with pytest.raises(ValueError):
        SamplerConfig(window_frames=4, overlap=-1)


def test_compose_cfg_hand_values():
    u = torch.zeros(2, 2)
    t = torch.ones(2, 2)
    ta = torch.full((2, 2), 2.0)
    out = compose_cfg(u, t, ta, 3.0, 9.0)
    assert torch.equal(out, torch.full((2, 2), 12.0))
    assert torch.equal(compose_cfg(u, t, ta, 1.0, 1.0), ta)
    assert torch.equal(compose_cfg(u, t, ta, 0.0, 0.0), u)
    with pytest.raises(ValueError):
        compose_cfg(u, t, torch.zeros(3), 1.0, 1.0)


def test_negative_prompt_phase_selection():
    n_motion = torch.randn(3, 8, generator=torch.Generator().manual_seed(0))
    n_detail = torch.randn(3, 8, generator=torch.Generator().manual_seed(1))
    sched = NegativePromptSchedule(n_motion=n_motion, n_detail=n_detail)
    assert torch.equal(png_negative(600.0, sched), n_motion)
    assert torch.equal(png_negative(999.0, sched), n_motion)
    assert torch.equal(png_negative(599.999, sched), n_detail)
    assert torch.equal(png_negative(0.0, sched), n_detail)


def test_negative_prompt_half_weight_is_mean():
    n_motion = torch.full((2, 4), 2.0)
    n_detail = torch.full((2, 4), 6.0)
    sched = NegativePromptSchedule(n_motion=n_motion, n_detail=n_detail, w_early=0.5)
    assert torch.equal(png_negative(700.0, sched), torch.full((2, 4), 4.0))


def test_negative_prompt_continuous_in_weight():
    n_motion = torch.randn(2, 4, generator=torch.Generator().manual_seed(2))
    n_detail = torch.randn(2, 4, generator=torch.Generator().manual_seed(3))
    previous = None
    for w in torch.linspace(0, 1, 21).tolist():
        sched = NegativePromptSchedule(n_motion=n_motion, n_detail=n_detail, w_early=w)
        value = png_negative(800.0, sched)
        if previous is not None:
            assert (value - previous).abs().max() < 0.06 * (n_motion - n_detail).abs().max()
        previous = value


def test_blend_weights_sum_exactly_one():
    for n in range(0, 65):
        for f in range(n + 1):
            w_a, w_b = blend_weights(f, n)
            assert w_a + w_b == 1.0
    with pytest.raises(ValueError):
        blend_weights(3, 2)
    with pytest.raises(ValueError):
        blend_weights(-1, 2)


def test_overlap_blend_endpoints_exact():
    a = torch.randn(3, 4, generator=torch.Generator().manual_seed(4))
    b = torch.randn(3, 4, generator=torch.Generator().manual_seed(5))
    assert torch.equal(overlap_blend(a, b, 0, 5), a)
    assert torch.equal(overlap_blend(a, b, 5, 5), b)
    assert torch.equal(overlap_blend(a, b, 0, 0), a)


def test_overlap_blend_quarter_point():
    a = torch.full((2, 2), 4.0)
    b = torch.full((2, 2), 8.0)
    assert torch.equal(overlap_blend(a, b, 2, 8), torch.full((2, 2), 5.0))


def test_overlap_blend_of_equal_inputs_is_exact():
    v = torch.randn(3, 4, generator=torch.Generator().manual_seed(6))
    for n in (1, 3, 7):
        for f in range(n + 1):
            assert torch.equal(overlap_blend(v, v.clone(), f, n), v)


def test_overlap_blend_errors():
    a = torch.zeros(2)
    with pytest.raises(ValueError):
        overlap_blend(a, torch.zeros(3), 0, 1)
    with pytest.raises(ValueError):
        overlap_blend(a, a, 2, 1)
    with pytest.raises(ValueError):
        overlap_blend(a, a, 1, 0)


def test_long_video_cfg_hand_values():
    v = torch.full((2,), 3.0)
    v1 = torch.full((2,), 7.0)
    u = torch.full((2,), 1.0)
    # entry frame at unit scale: window-w guidance plus the conditional term
    assert torch.equal(long_video_cfg(v, v1, u, 0, 4, 1.0), torch.full((2,), 5.0))
    assert torch.equal(long_video_cfg(v, v1, u, 3, 4, 0.0), v)
    same = torch.full((2,), 2.5)
    for f in range(5):
        assert torch.equal(long_video_cfg(same, same, same, f, 4, 9.0), same)


def test_window_starts_cases():
    assert window_starts(13, 8, 3) == [0, 5]
    assert window_starts(8, 8, 3) == [0]
    assert window_starts(8, 4, 0) == [0, 4]
    assert window_starts(8, 4, 2) == [0, 2, 4]
    with pytest.raises(ValueError):
        window_starts(13, 8, 8)
    with pytest.raises(ValueError):
        window_starts(6, 8, 3)
    with pytest.raises(ValueError):
        window_starts(12, 8, 3)


def test_assemble_long_velocity_placement():
    # two windows of 4 frames over 6 total, sharing frames 2 and 3
    cfg = SamplerConfig(steps=1, s_text=1.0, s_audio=1.0, overlap=2, s_overlap=2.0)

    def arm(fill):
        return torch.full((4, 1, 1, 1), fill)

    arms = [
        (arm(1.0), arm(2.0), arm(3.0)),     # window 0: uncond 1, cond 3
        (arm(10.0), arm(20.0), arm(30.0)),  # window 1: uncond 10, cond 30
    ]
    out = assemble_long_velocity(arms, [0, 2], 4, 2, cfg, 6)
    flat = out.reshape(6)
    # unshared frames: s_text = s_audio = 1 collapses onto the full-condition arm
    assert flat[0] == 3.0 and flat[1] == 3.0
    assert flat[4] == 30.0 and flat[5] == 30.0
    # shared frame f=0: v_w + s*(v_w - u_w) = 3 + 2*(3 - 1)
    assert flat[2] == 7.0
    # shared frame f=1: blend = 0.5*3 + 0.5*30; v_w + s*(blend - u_w)
    assert flat[3] == 3.0 + 2.0 * (16.5 - 1.0)


def test_euler_zero_velocity_single_step_keeps_noise():
    _, _, _, prep = prep_clip()
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)  # zero-init head
    out = euler_sample(
        model, prep, TaskKind.I2V, SamplerConfig(steps=1),
        generator=torch.Generator().manual_seed(5),
    )
    noise = torch.randn(prep.latent.shape, generator=torch.Generator().manual_seed(5))
    expected = reimpose_known(noise, prep.latent, task_mask_for(TaskKind.I2V, prep))
    assert torch.equal(out, expected)


def test_euler_all_given_mask_returns_reference():
    _, _, _, prep = prep_clip()
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(2))
    all_given = TaskMask(values=torch.zeros(4, 1, 32, 32), kind=TaskKind.I2V)
    out = euler_sample(
        model, prep, TaskKind.I2V, SamplerConfig(steps=3),
        generator=torch.Generator().manual_seed(0), mask=all_given,
    )
    assert torch.equal(out, prep.latent)


def test_euler_pins_given_regions():
    _, _, _, prep = prep_clip()
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(3))
    out = euler_sample(
        model, prep, TaskKind.FLF2V, SamplerConfig(steps=4),
        generator=torch.Generator().manual_seed(1),
    )
    assert torch.allclose(out[0], prep.latent[0], atol=1e-6)
    assert torch.allclose(out[-1], prep.latent[-1], atol=1e-6)
    assert not torch.allclose(out[1], prep.latent[1], atol=1e-2)


def test_euler_deterministic_in_seed():
    _, _, _, prep = prep_clip()
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(4))
    cfg = SamplerConfig(steps=3)
    a = euler_sample(model, prep, TaskKind.T2V, cfg, generator=torch.Generator().manual_seed(7))
    b = euler_sample(model, prep, TaskKind.T2V, cfg, generator=torch.Generator().manual_seed(7))
    c = euler_sample(model, prep, TaskKind.T2V, cfg, generator=torch.Generator().manual_seed(8))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_euler_aborts_on_non_finite_velocity():
    _, _, _, prep = prep_clip()
    template = build_model(SMALL, PhaseWeightConfig(), seed=1)
    broken = ConstantVelocityModel(template, float("inf"))
    with pytest.raises(RuntimeError, match="non-finite"):
        euler_sample(
            broken, prep, TaskKind.T2V, SamplerConfig(steps=2),
            generator=torch.Generator().manual_seed(0),
        )


def test_single_window_long_generation_matches_euler():
    pcfg, _, _, prep = prep_clip()
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(5))
    cfg = SamplerConfig(steps=3)
    a = euler_sample(model, prep, TaskKind.I2V, cfg, generator=torch.Generator().manual_seed(9))
    b = sliding_window_generate(
        model, prep, TaskKind.I2V, cfg, pcfg, generator=torch.Generator().manual_seed(9)
    )
    assert torch.equal(a, b)


def test_zero_overlap_windows_are_independent():
    pcfg, _, _, prep = prep_clip(t_video=16, seed=2)
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(6))
    cfg = SamplerConfig(steps=2, overlap=0)
    init = torch.randn(prep.latent.shape, generator=torch.Generator().manual_seed(3))
    joint = sliding_window_generate(model, prep, TaskKind.T2V, cfg, pcfg, init=init)

    from maskflow.sampling import _window_view

    pieces = []
    for start in window_starts(8, 4, 0):
        view = _window_view(prep, pcfg, start, 4)
        piece = euler_sample(
            model, view, TaskKind.T2V, cfg, init=init[start : start + 4],
            mask=TaskMask(values=torch.ones(4, 1, 32, 32), kind=TaskKind.T2V),
        )
        pieces.append(piece)
    assert torch.equal(joint, torch.cat(pieces, dim=0))


def test_constant_denoiser_leaves_no_window_seam():
    pcfg, _, _, prep = prep_clip(t_video=16, seed=3)
    template = build_model(SMALL, PhaseWeightConfig(), seed=1)
    constant = ConstantVelocityModel(template, 0.371)
    cfg = SamplerConfig(steps=4, overlap=2, s_overlap=2.0)
    frame = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    out = sliding_window_generate(
        constant, prep, TaskKind.T2V, cfg, pcfg, init=frame.repeat(8, 1, 1, 1)
    )
    for f in range(1, 8):
        assert torch.equal(out[f], out[0])


def test_long_generation_with_negative_schedule_runs():
    pcfg, enc, _, prep = prep_clip(t_video=16, seed=4)
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(8))
    cfg = SamplerConfig(steps=3, overlap=2, negative=default_negative_schedule(enc))
    out = sliding_window_generate(
        model, prep, TaskKind.I2V, cfg, pcfg, generator=torch.Generator().manual_seed(2)
    )
    assert out.shape == prep.latent.shape
    assert torch.isfinite(out).all()


def test_window_frames_must_match_backbone():
    pcfg, _, _, prep = prep_clip(t_video=16)
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    cfg = SamplerConfig(steps=1, window_frames=8, overlap=0)
    with pytest.raises(ValueError, match="backbone"):
        sliding_window_generate(model, prep, TaskKind.T2V, cfg, pcfg)
    with pytest.raises(ValueError, match="backbone"):
        independent_window_generate(model, prep, TaskKind.T2V, cfg, pcfg)


def test_modal_scales_rescale_guidance():
    _, _, _, prep = prep_clip(t_video=8, seed=5)
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(4))
    base = SamplerConfig(steps=2)
    init = torch.randn(prep.latent.shape, generator=torch.Generator().manual_seed(7))
    plain = euler_sample(model, prep, TaskKind.LIP_SYNC, base, init=init)
    unit = euler_sample(
        model, prep, TaskKind.LIP_SYNC,
        SamplerConfig(steps=2, modal_scales={"text": 1.0, "audio": 1.0, "image": 1.0}),
        init=init,
    )
    assert torch.equal(plain, unit)
    muted = euler_sample(
        model, prep, TaskKind.LIP_SYNC,
        SamplerConfig(steps=2, modal_scales={"audio": 0.0}), init=init,
    )
    assert not torch.equal(plain, muted)


def test_independent_windows_match_manual_stitch():
    pcfg, _, _, prep = prep_clip(t_video=16, seed=6)
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(9))
    cfg = SamplerConfig(steps=2, overlap=2)
    init = torch.randn(prep.latent.shape, generator=torch.Generator().manual_seed(11))
    out = independent_window_generate(model, prep, TaskKind.T2V, cfg, pcfg, init=init)

    from maskflow.sampling import _window_view

    ones = TaskMask(values=torch.ones(4, 1, 32, 32), kind=TaskKind.T2V)
    expected = torch.zeros_like(prep.latent)
    for w, start in enumerate(window_starts(8, 4, 2)):
        view = _window_view(prep, pcfg, start, 4)
        piece = euler_sample(model, view, TaskKind.T2V, cfg, init=init[start : start + 4], mask=ones)
        keep = 0 if w == 0 else 2
        expected[start + keep : start + 4] = piece[keep:]
    assert torch.equal(out, expected)


def test_independent_windows_equal_blended_at_zero_overlap():
    pcfg, _, _, prep = prep_clip(t_video=16, seed=7)
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    model.randomize_parameters(torch.Generator().manual_seed(10))
    cfg = SamplerConfig(steps=2, overlap=0)
    init = torch.randn(prep.latent.shape, generator=torch.Generator().manual_seed(12))
    a = independent_window_generate(model, prep, TaskKind.T2V, cfg, pcfg, init=init)
    b = sliding_window_generate(model, prep, TaskKind.T2V, cfg, pcfg, init=init)
    assert torch.equal(a, b)

    with_overlap = SamplerConfig(steps=2, overlap=2)
    c = independent_window_generate(model, prep, TaskKind.T2V, with_overlap, pcfg, init=init)
    d = sliding_window_generate(model, prep, TaskKind.T2V, with_overlap, pcfg, init=init)
    assert not torch.equal(c, d)


def test_mining_sampler_adapter_shape():
    _, _, _, prep = prep_clip()
    model = build_model(SMALL, PhaseWeightConfig(), seed=1)
    sample = mining_sampler(SamplerConfig(steps=1))
    out = sample(model, prep, TaskKind.I2V, torch.Generator().manual_seed(0))
    assert out.shape == prep.latent.shape
