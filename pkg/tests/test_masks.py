from __future__ import annotations

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from maskflow.masks import (
    Region,
    TaskKind,
    TaskMask,
    assemble_model_input,
    build_task_mask,
    mask_ratio,
    reimpose_known,
)


def test_t2v_masks_everything():
    mask = build_task_mask(TaskKind.T2V, (4, 8, 8))
    assert torch.equal(mask.values, torch.ones(4, 1, 8, 8))
    assert mask_ratio(mask) == 1.0


def test_i2v_keeps_first_frame():
    mask = build_task_mask(TaskKind.I2V, (5, 8, 8))
    assert torch.all(mask.values[0] == 0)
    assert torch.all(mask.values[1:] == 1)
    assert mask_ratio(mask) == pytest.approx(0.8, abs=1e-12)


def test_flf2v_keeps_first_and_last():
    mask = build_task_mask(TaskKind.FLF2V, (4, 8, 8))
    assert torch.all(mask.values[0] == 0)
    assert torch.all(mask.values[-1] == 0)
    assert torch.all(mask.values[1:-1] == 1)
    assert mask_ratio(mask) == pytest.approx(0.5, abs=1e-12)


def test_flf2v_needs_two_frames():
    with pytest.raises(ValueError):
        build_task_mask(TaskKind.FLF2V, (1, 8, 8))


def test_lip_sync_rectangle_on_every_frame():
    # (4, 8, 8) grid with a 2x4 mouth: 4*2*4 = 32 generated cells.
    mask = build_task_mask(TaskKind.LIP_SYNC, (4, 8, 8), region=Region(5, 2, 2, 4))
    assert mask.values.sum() == 32
    assert mask_ratio(mask) == pytest.approx(0.125, abs=1e-12)
    for f in range(4):
        assert torch.equal(mask.values[f], mask.values[0])
    assert torch.all(mask.values[:, :, 5:7, 2:6] == 1)
    carved = mask.values.clone()
    carved[:, :, 5:7, 2:6] = 0
    assert torch.all(carved == 0)


def test_lip_sync_requires_region():
    with pytest.raises(ValueError):
        build_task_mask(TaskKind.LIP_SYNC, (4, 8, 8))


def test_region_rejected_for_other_tasks():
    with pytest.raises(ValueError):
        build_task_mask(TaskKind.I2V, (4, 8, 8), region=Region(0, 0, 2, 2))


def test_region_bounds_checked():
    with pytest.raises(ValueError):
        build_task_mask(TaskKind.LIP_SYNC, (4, 8, 8), region=Region(7, 7, 2, 2))
    with pytest.raises(ValueError):
        Region(0, 0, 0, 3)
    with pytest.raises(ValueError):
        Region(-1, 0, 2, 2)


def test_masks_are_binary():
    for kind in TaskKind:
        region = Region(1, 1, 2, 2) if kind == TaskKind.LIP_SYNC else None
        mask = build_task_mask(kind, (4, 6, 6), region=region)
        assert set(mask.values.unique().tolist()) <= {0.0, 1.0}


@given(
    top=st.integers(0, 4),
    left=st.integers(0, 4),
    height=st.integers(1, 4),
    width=st.integers(1, 4),
    frames=st.integers(1, 6),
)
def test_lip_sync_ratio_is_region_area_fraction(top, left, height, width, frames):
    mask = build_task_mask(
        TaskKind.LIP_SYNC, (frames, 8, 8), region=Region(top, left, height, width)
    )
    assert mask_ratio(mask) == pytest.approx(height * width / 64.0, abs=1e-9)


def test_assemble_model_input_layout():
    g = torch.Generator().manual_seed(7)
    noisy = torch.randn(4, 3, 8, 8, generator=g)
    reference = torch.randn(4, 3, 8, 8, generator=g)
    mask = build_task_mask(TaskKind.I2V, (4, 8, 8))
    out = assemble_model_input(noisy, reference, mask)
    assert out.shape == (4, 7, 8, 8)
    assert torch.equal(out[:, :3], noisy)
    assert torch.equal(out[:, 6:7], mask.values)
    # conditioning block: reference on given frames, zero elsewhere
    assert torch.equal(out[0, 3:6], reference[0])
    assert torch.all(out[1:, 3:6] == 0)


def test_assemble_model_input_shape_errors():
    noisy = torch.zeros(4, 3, 8, 8)
    mask = build_task_mask(TaskKind.T2V, (4, 8, 8))
    with pytest.raises(ValueError):
        assemble_model_input(noisy, torch.zeros(4, 3, 8, 4), mask)
    with pytest.raises(ValueError):
        assemble_model_input(noisy, noisy, build_task_mask(TaskKind.T2V, (3, 8, 8)))


def test_reimpose_known_pins_given_regions():
    g = torch.Generator().manual_seed(3)
    latent = torch.randn(4, 3, 8, 8, generator=g)
    reference = torch.randn(4, 3, 8, 8, generator=g)
    mask = build_task_mask(TaskKind.FLF2V, (4, 8, 8))
    out = reimpose_known(latent, reference, mask)
    assert torch.equal(out[0], reference[0])
    assert torch.equal(out[-1], reference[-1])
    assert torch.equal(out[1:3], latent[1:3])


def test_reimpose_known_all_given_returns_reference():
    latent = torch.randn(3, 2, 4, 4)
    reference = torch.randn(3, 2, 4, 4)
    zero = TaskMask(values=torch.zeros(3, 1, 4, 4), kind=TaskKind.I2V)
    assert torch.equal(reimpose_known(latent, reference, zero), reference)
    full = build_task_mask(TaskKind.T2V, (3, 4, 4))
    assert torch.equal(reimpose_known(latent, reference, full), latent)
