import math

import numpy as np
import pytest
import torch

from dap.config import LossWeights
from dap.errors import (BatchSizeError, ConfigError, DegeneratePartitionError, NumericalError,
                        RangeError)
from dap.losses import (dice_loss, global_contrastive, local_contrastive, local_contrastive_batch,
                        negative_mask, total_loss)
from dap.prompting import select_fg_bg
from _fd import fd_check


def _orthogonal_pair():
    img = torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]], dtype=torch.float64)
    cls = torch.tensor([[0, 0, 1.0, 0], [0, 0, 0, 1.0]], dtype=torch.float64)
    return img, cls


def test_global_all_zero_cosines_is_log2():
    img, cls = _orthogonal_pair()
    assert float(global_contrastive(img, cls, 1.0)) == pytest.approx(math.log(2), abs=1e-6)


def test_global_literal_denominator_all_zero():
    img, cls = _orthogonal_pair()
    assert float(global_contrastive(img, cls, 1.0, literal_denominator=True)) == pytest.approx(0.0, abs=1e-12)


def test_global_saturated_limit():
    u = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    assert float(global_contrastive(u, u, 0.01)) < 1e-60


def test_global_symmetric_closed_form():
    # cos(i, i) = c, cos(i, j) = s for both rows -> log(1 + exp((s - c)/T))
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    b = torch.tensor([[math.cos(0.3), math.sin(0.3)], [math.sin(0.3), math.cos(0.3)]], dtype=torch.float64)
    c, s = math.cos(0.3), math.sin(0.3)
    expected = math.log(1 + math.exp((s - c) / 0.5))
    assert float(global_contrastive(a, b, 0.5)) == pytest.approx(expected, abs=1e-12)


def test_global_scale_invariance():
    rng = np.random.default_rng(0)
    img = torch.from_numpy(rng.normal(size=(5, 6)))
    cls = torch.from_numpy(rng.normal(size=(5, 6)))
    scale = torch.from_numpy(rng.uniform(0.1, 9, size=(5, 1)))
    assert float(global_contrastive(img * scale, cls, 0.7)) == pytest.approx(
        float(global_contrastive(img, cls, 0.7)), abs=1e-12)


def test_global_errors():
    x = torch.ones(1, 3)
    with pytest.raises(BatchSizeError):
        global_contrastive(x, x)
    with pytest.raises(ConfigError):
        global_contrastive(torch.ones(2, 3), torch.ones(2, 3), temperature=0)


def test_negative_mask_excludes_same_class():
    m = negative_mask([(0,), (1,), (0,)], 3)
    assert m.tolist() == [[False, True, False], [True, False, True], [False, True, False]]


def test_local_equal_cosines_is_log2():
    tokens = torch.tensor([[1.0, 0.0], [2.0, 0.0]], dtype=torch.float64)
    part = select_fg_bg(tokens, torch.tensor([0.9, 0.1]), 0.3)
    loss, skipped = local_contrastive(part, torch.tensor([1.0, 1.0], dtype=torch.float64), 1.0)
    assert not skipped
    assert float(loss) == pytest.approx(math.log(2), abs=1e-6)


def test_local_empty_fg_skips_and_empty_bg_errors():
    tokens = torch.eye(3, dtype=torch.float64)
    loss, skipped = local_contrastive(select_fg_bg(tokens, torch.zeros(3), 0.3), torch.ones(3))
    assert skipped and float(loss) == 0.0
    with pytest.raises(DegeneratePartitionError):
        local_contrastive(select_fg_bg(tokens, torch.ones(3), 0.3), torch.ones(3))


def test_local_monotone_in_bg_similarity():
    cls = torch.tensor([1.0, 0.0], dtype=torch.float64)
    losses = []
    for angle in (2.5, 1.5, 0.5):
        tokens = torch.tensor([[1.0, 0.2], [math.cos(angle), math.sin(angle)]], dtype=torch.float64)
        part = select_fg_bg(tokens, torch.tensor([1.0, 0.0]), 0.3)
        losses.append(float(local_contrastive(part, cls)[0]))
    assert losses[0] < losses[1] < losses[2]


def test_local_batch_matches_single():
    rng = np.random.default_rng(3)
    patches = torch.from_numpy(rng.normal(size=(2, 6, 4)))
    cls = torch.from_numpy(rng.normal(size=(2, 4)))
    fg = torch.tensor([[1, 1, 0, 0, 0, 0], [0, 0, 0, 1, 0, 0]], dtype=torch.bool)
    batch, used, skipped = local_contrastive_batch(patches, cls, fg, 0.5)
    singles = [float(local_contrastive(select_fg_bg(patches[i], fg[i].double(), 0.5), cls[i], 0.5)[0])
               for i in range(2)]
    assert (used, skipped) == (2, 0)
    assert float(batch) == pytest.approx(np.mean(singles), abs=1e-12)


def test_dice_loss_cases():
    t = torch.full((2, 2), 0.5, dtype=torch.float64)
    assert float(dice_loss(t, t, eps=1.0)) == pytest.approx(0.4, abs=1e-12)
    m = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    assert float(dice_loss(m, m, eps=1e-6)) == pytest.approx(0.0, abs=1e-6)
    assert float(dice_loss(torch.zeros(8, 8), torch.ones(8, 8), eps=1e-6)) == pytest.approx(1.0, abs=1e-6)


def test_dice_loss_symmetric():
    rng = np.random.default_rng(4)
    a, b = torch.from_numpy(rng.uniform(size=(3, 5, 5))), torch.from_numpy(rng.uniform(size=(3, 5, 5)))
    assert float(dice_loss(a, b)) == pytest.approx(float(dice_loss(b, a)), abs=1e-15)


def test_dice_loss_range_error():
    with pytest.raises(RangeError):
        dice_loss(torch.full((2, 2), 1.5), torch.zeros(2, 2))


def test_total_loss():
    assert total_loss(0.5, 0.25, 0.25, LossWeights(1, 1, 1)) == pytest.approx(1.0)
    w = LossWeights()
    assert (w.w_glb, w.w_lcl, w.w_seg) == (1.0, 0.1, 1.0)
    assert total_loss(0.0, 0.0, 0.0) == 0.0
    with pytest.raises(NumericalError) as info:
        total_loss(1.0, float("nan"), 0.0)
    assert info.value.component == "lcl"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    img = torch.from_numpy(rng.normal(size=(4, 8))).requires_grad_()
    cls = torch.from_numpy(rng.normal(size=(4, 8))).requires_grad_()
    patches = torch.from_numpy(rng.normal(size=(4, 9, 8))).requires_grad_()
    fg = torch.from_numpy(rng.uniform(size=(4, 9)) > 0.6)
    fg[:, 0], fg[:, 1] = True, False
    pred = torch.from_numpy(rng.uniform(0.1, 0.9, size=(4, 6, 6))).requires_grad_()
    target = torch.from_numpy(rng.uniform(size=(4, 6, 6)))
    sets = [(0,), (1,), (0,), (2,)]
    assert fd_check(lambda: global_contrastive(img, cls, 0.5, sets), [img, cls]) < 1e-4
    assert fd_check(lambda: global_contrastive(img, cls, 1.0, sets, True), [img, cls]) < 1e-4
    assert fd_check(lambda: local_contrastive_batch(patches, cls, fg, 0.5)[0], [patches, cls]) < 1e-4
    assert fd_check(lambda: dice_loss(pred, target), [pred]) < 1e-4
