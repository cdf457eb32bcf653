import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dap.errors import MaskCoverageError
from dap.metrics import (MetricsReport, DiagnosticsBlock, area_strata, cnr, dice, iou,
                         pointing_game, summarize)


def test_cnr_hand_oracle():
    heat = np.array([[2.0, 4.0], [0.0, 2.0]])
    gt = np.array([[1, 1], [0, 0]])
    assert cnr(heat, gt, eps_var=0.0) == pytest.approx(2 / math.sqrt(2), abs=1e-6)


def test_cnr_constant_map_is_zero():
    assert cnr(np.full((4, 4), 0.7), np.eye(4)) == 0.0


def test_cnr_sign_flip():
    rng = np.random.default_rng(0)
    heat, gt = rng.normal(size=(8, 8)), rng.uniform(size=(8, 8)) > 0.6
    assert cnr(-heat, gt) == pytest.approx(-cnr(heat, gt))


@pytest.mark.parametrize("gt", [np.ones((3, 3)), np.zeros((3, 3))])
def test_cnr_needs_both_regions(gt):
    with pytest.raises(MaskCoverageError):
        cnr(np.zeros((3, 3)), gt)


@given(a=st.floats(0.1, 10), b=st.floats(-5, 5))
@settings(max_examples=30, deadline=None)
def test_cnr_affine_invariance(a, b):
    rng = np.random.default_rng(1)
    heat, gt = rng.normal(size=(6, 6)), rng.uniform(size=(6, 6)) > 0.5
    assert cnr(a * heat + b, gt, eps_var=0) == pytest.approx(cnr(heat, gt, eps_var=0), rel=1e-9)


def test_pointing_game_cases():
    gt = np.zeros((3, 3), dtype=bool)
    gt[1, 1] = True
    heat = np.zeros((3, 3))
    heat[1, 1] = 1
    assert pointing_game(heat, gt)
    heat[1, 1], heat[0, 2] = 0, 1
    assert not pointing_game(heat, gt)
    uniform = np.ones((3, 3))
    assert not pointing_game(uniform, gt)
    gt[0, 0] = True
    assert pointing_game(uniform, gt)


def test_pointing_game_monotone_invariance():
    rng = np.random.default_rng(2)
    heat, gt = rng.normal(size=(8, 8)), rng.uniform(size=(8, 8)) > 0.7
    assert pointing_game(np.exp(3 * heat) + 1, gt) == pointing_game(heat, gt)


def test_dice_iou_fixtures():
    a = np.array([[1, 1], [0, 0]])
    assert dice(a, a) == 1.0 and iou(a, a) == 1.0
    assert dice(a, 1 - a) == 0.0 and iou(a, 1 - a) == 0.0
    g = np.array([[1, 1, 1, 1]])
    p = np.array([[1, 1, 0, 0]])
    assert dice(p, g) == pytest.approx(2 / 3, abs=1e-6)
    assert iou(p, g) == pytest.approx(0.5, abs=1e-6)
    z = np.zeros((2, 2))
    assert dice(z, z) == 1.0 and iou(z, z) == 1.0


@given(arrays(np.bool_, (5, 5)), arrays(np.bool_, (5, 5)))
@settings(max_examples=100, deadline=None)
def test_dice_iou_identity(p, g):
    d, j = dice(p, g), iou(p, g)
    assert d >= j
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)


def test_area_strata():
    assert [len(g) for g in area_strata(np.arange(100))] == [20] * 5
    with pytest.warns(UserWarning):
        groups = area_strata(np.full(10, 7))
    assert len(groups) == 1 and len(groups[0]) == 10


def test_report_json_round_trip():
    per = [{"cnr": 1.5, "pg": True, "dice": 0.25, "iou": 1 / 7}]
    rep = summarize(per, ["a"])
    rep.diagnostics = DiagnosticsBlock(dice_norm_vs_bg=0.1, strata={"area": [{"n": 1}]})
    back = MetricsReport.from_json(rep.to_json())
    assert back.to_json() == rep.to_json()
    assert back.iou == 1 / 7
