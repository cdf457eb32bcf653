import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dap.errors import DimensionError
from dap.prompting import DEFAULT_THRESHOLD, apply_prompt, select_fg_bg, upsample_prompt


def test_apply_prompt_cases():
    v = torch.tensor([[2.0, -4.0], [1.0, 1.0]])
    assert torch.equal(apply_prompt(v, torch.ones(2)), v)
    assert torch.equal(apply_prompt(v, torch.zeros(2)), torch.zeros_like(v))
    assert apply_prompt(v, torch.tensor([0.5, 1.0]))[0].tolist() == [1.0, -2.0]


def test_apply_prompt_mismatch():
    with pytest.raises(DimensionError):
        apply_prompt(torch.ones(3, 2), torch.ones(4))


@given(st.floats(-5, 5))
@settings(max_examples=25, deadline=None)
def test_apply_prompt_linear(alpha):
    rng = np.random.default_rng(0)
    v = torch.from_numpy(rng.normal(size=(2, 4, 3)))
    phi = torch.from_numpy(rng.uniform(size=(2, 2, 2)))
    assert torch.allclose(apply_prompt(alpha * v, phi), alpha * apply_prompt(v, phi), atol=1e-12)


def test_apply_prompt_gradient_flow():
    v = torch.ones(2, 3, requires_grad=True)
    phi = torch.tensor([0.2, 0.7], requires_grad=True)
    apply_prompt(v, phi).sum().backward()
    assert v.grad is not None and phi.grad is not None
    assert v.grad[:, 0].tolist() == pytest.approx([0.2, 0.7])


def test_select_fg_bg_cases():
    tokens = torch.eye(2)
    p = select_fg_bg(tokens, torch.zeros(2), 0.3)
    assert len(p.fg_index) == 0 and p.bg_index.tolist() == [0, 1]
    p = select_fg_bg(tokens, torch.tensor([0.2, 0.9]), 0.3)
    assert p.fg_index.tolist() == [1] and p.bg_index.tolist() == [0]
    assert DEFAULT_THRESHOLD == 0.3


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
@settings(max_examples=40, deadline=None)
def test_fg_monotone_in_threshold(t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    phi = torch.from_numpy(np.random.default_rng(1).uniform(size=16))
    tokens = torch.zeros(16, 2)
    a = set(select_fg_bg(tokens, phi, lo).fg_index.tolist())
    b = set(select_fg_bg(tokens, phi, hi).fg_index.tolist())
    assert b <= a
    p = select_fg_bg(tokens, phi, lo)
    assert set(p.fg_index.tolist()).isdisjoint(p.bg_index.tolist())
    assert len(p.fg_index) + len(p.bg_index) == 16


def test_upsample_prompt():
    up = upsample_prompt(torch.tensor([[0.0, 1.0]]), 2)
    assert up.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1]]
