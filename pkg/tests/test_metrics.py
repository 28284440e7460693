from __future__ import annotations

import math
import statistics

import pytest
import torch

from maskflow.data import gen_dataset
from maskflow.masks import Region
from maskflow.metrics import (
    envelope,
    metric_identity,
    metric_seam,
    metric_sync,
    pearson,
    psnr,
)


def test_pearson_basics():
    a = torch.tensor([1.0, 2.0, 3.0, 4.0])
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)
    assert pearson(a, 2.0 * a + 3.0) == pytest.approx(1.0)
    assert pearson(a, torch.ones(4)) == 0.0  # zero variance convention
    with pytest.raises(ValueError):
        pearson(a, torch.ones(5))


def test_envelope_chunks():
    wave = torch.tensor([1.0, -1.0, 0.0, 0.0, 2.0, 2.0])
    torch.testing.assert_close(envelope(wave, 3), torch.tensor([1.0, 0.0, 2.0]))
    with pytest.raises(ValueError):
        envelope(torch.zeros(3), 4)


def test_sync_constant_video_is_zero():
    video = torch.full((8, 3, 32, 32), 0.5)
    wave = torch.randn(320)
    assert metric_sync(video, wave, Region(24, 12, 6, 8)) == 0.0


def test_sync_shuffled_frames_decorrelate():
    # needs clips long enough for the permutation baseline to have power
    clip = gen_dataset(1, t_video=32, seed=3)[0]
    vals = []
    for s in range(20):
        g = torch.Generator().manual_seed(s)
        perm = torch.randperm(32, generator=g)
        vals.append(abs(metric_sync(clip.pixels[perm], clip.waveform, clip.mouth)))
    assert statistics.mean(vals) < 0.2


def test_seam_constant_video_is_one():
    const = torch.zeros(13, 3, 8, 8)
    assert metric_seam(const, [0, 5], 3) == 1.0


def test_seam_single_window_is_one():
    video = torch.randn(8, 3, 8, 8)
    assert metric_seam(video, [0], 3) == 1.0


def test_seam_flags_hard_cut_at_join():
    # windows [0..7], [5..12]; fresh content of window 2 starts at frame 8
    video = 0.01 * torch.arange(13.0).reshape(13, 1, 1, 1).expand(13, 3, 8, 8).clone()
    video[8:] += 1.0
    ratio = metric_seam(video, [0, 5], 3)
    assert ratio > 10.0
    smooth = 0.01 * torch.arange(13.0).reshape(13, 1, 1, 1).expand(13, 3, 8, 8)
    assert metric_seam(smooth, [0, 5], 3) == pytest.approx(1.0)


def test_seam_needs_two_frames():
    with pytest.raises(ValueError):
        metric_seam(torch.zeros(1, 3, 4, 4), [0], 0)


def test_identity_repeated_reference_is_one():
    frame = torch.rand(3, 16, 16)
    video = frame.unsqueeze(0).repeat(6, 1, 1, 1)
    region = Region(0, 0, 4, 16)
    assert metric_identity(video, frame, region) == pytest.approx(1.0)


def test_identity_random_frames_near_zero():
    region = Region(0, 0, 8, 32)
    vals = []
    for s in range(20):
        g = torch.Generator().manual_seed(1000 + s)
        video = torch.rand(8, 3, 32, 32, generator=g)
        ref = torch.rand(3, 32, 32, generator=g)
        vals.append(abs(metric_identity(video, ref, region)))
    assert max(vals) < 0.2


def test_psnr():
    a = torch.zeros(4, 4)
    b = torch.full((4, 4), 0.125)  # exactly representable
    assert psnr(a, b) == pytest.approx(10.0 * math.log10(64.0), abs=1e-12)
    assert psnr(a, a) == math.inf
    with pytest.raises(ValueError):
        psnr(a, torch.zeros(3, 3))
