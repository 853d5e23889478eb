import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hermes.pseudo import (
    MemoryBank,
    bank_negatives,
    bank_push,
    downsample_labels,
    dual_threshold_gate,
    entropy,
    make_pseudo_labels,
    sample_anchors,
)


def scalar_entropy(p, eps=1e-8):
    return max(0.0, -sum(q * math.log(q + eps) for q in p if q > 0))


def test_entropy_examples():
    assert abs(float(entropy(torch.tensor([0.5, 0.5], dtype=torch.float64))) - math.log(2)) < 1e-7
    assert float(entropy(torch.tensor([1.0, 0.0]))) == 0.0
    # H(0.9, 0.1) by hand
    assert abs(float(entropy(torch.tensor([0.9, 0.1], dtype=torch.float64))) - 0.325083) < 1e-6


def test_entropy_rejects_negative():
    with pytest.raises(ValueError):
        entropy(torch.tensor([1.2, -0.2]))


def test_entropy_batched_layouts():
    p = torch.softmax(torch.randn(3, 2, 4, 5, dtype=torch.float64), dim=1)
    h = entropy(p)
    assert h.shape == (3, 4, 5)
    assert abs(float(h[1, 2, 3]) - scalar_entropy(p[1, :, 2, 3].tolist())) < 1e-12


def test_gate_examples():
    g = dual_threshold_gate(torch.tensor([0.95, 0.05]), kappa=0.5, tau=0.9)
    assert bool(g.accepted)
    g = dual_threshold_gate(torch.tensor([0.6, 0.4]), kappa=0.75, tau=0.855)
    assert not bool(g.accepted)
    # confident enough but kappa tighter than H(0.9, 0.1)
    g = dual_threshold_gate(torch.tensor([0.9, 0.1], dtype=torch.float64), kappa=0.3, tau=0.85)
    assert not bool(g.accepted)


def test_gate_equals_scalar_brute_force():
    rng = np.random.default_rng(0)
    p = rng.dirichlet([0.3, 0.3], size=5000)
    for kappa, tau in [(0.75, 0.855), (0.25, 0.923), (0.5, 0.9)]:
        g = dual_threshold_gate(torch.from_numpy(p), kappa, tau)
        brute = [scalar_entropy(row) <= kappa and max(row) >= tau for row in p]
        assert g.accepted.tolist() == brute


@settings(max_examples=50)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.5, 1.0), st.floats(0.5, 1.0), st.integers(0, 10_000))
def test_gate_monotone(k1, k2, t1, t2, seed):
    p = torch.from_numpy(np.random.default_rng(seed).dirichlet([1, 1], size=200))
    loose = dual_threshold_gate(p, max(k1, k2), min(t1, t2)).accepted
    tight = dual_threshold_gate(p, min(k1, k2), max(t1, t2)).accepted
    assert not (tight & ~loose).any()


def test_two_class_confidence_implies_low_entropy():
    p = torch.from_numpy(np.random.default_rng(1).dirichlet([1, 1], size=20000))
    confident = p.amax(dim=1) >= 0.75
    h75 = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))  # 0.562335
    assert abs(h75 - 0.5623) < 1e-4
    assert (entropy(p)[confident] <= h75).all()
    # entropy gate with kappa >= H(0.75, 0.25) is implied by the confidence gate
    assert torch.equal(dual_threshold_gate(p, h75, 0.75).accepted, confident)


def test_empty_and_pseudo_labels():
    g = dual_threshold_gate(torch.zeros(0, 2), 0.5, 0.9)
    assert g.accepted.numel() == 0 and g.fraction == 0.0
    assert make_pseudo_labels(torch.tensor([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


def test_downsample_labels_picks_cell_centres():
    lab = torch.arange(64).reshape(1, 8, 8)
    out = downsample_labels(lab, (2, 2))
    assert out.tolist() == [[[lab[0, 2, 2].item(), lab[0, 2, 6].item()], [lab[0, 6, 2].item(), lab[0, 6, 6].item()]]]


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_anchor_pools_disjoint_subsets(seed, half):
    rng = np.random.default_rng(seed)
    accepted = rng.random((2, 6, 6)) < 0.6
    weak = rng.integers(0, 2, (2, 6, 6))
    strong = np.where(rng.random((2, 6, 6)) < 0.3, 1 - weak, weak)
    a = sample_anchors(accepted, weak, weak, strong, 2 * half, rng)
    acc = accepted.ravel()
    assert len(set(a.hard) & set(a.simple)) == 0
    assert acc[a.positions].all()
    assert (weak.ravel()[a.hard] != strong.ravel()[a.hard]).all()
    assert (weak.ravel()[a.simple] == strong.ravel()[a.simple]).all()
    assert len(a) == min(2 * half, acc.sum())
    assert (a.classes == weak.ravel()[a.positions]).all()


def test_anchor_backfill_and_stride():
    accepted = np.ones((1, 4, 4), bool)
    weak = np.zeros((1, 4, 4), int)
    strong = weak.copy()
    strong[0, 0, 0] = 1  # a single hard position
    a = sample_anchors(accepted, weak, weak, strong, 8, np.random.default_rng(0))
    assert len(a.hard) == 1 and len(a.simple) == 7
    a = sample_anchors(accepted, weak, weak, strong, 16, np.random.default_rng(0), stride=2)
    assert len(a) == 4
    assert all(p // 4 % 2 == 0 and p % 4 % 2 == 0 for p in a.positions)
    with pytest.raises(ValueError):
        sample_anchors(accepted, weak, weak, strong, 3, np.random.default_rng(0))


def unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True)).float()


def test_bank_against_list_reference():
    rng = np.random.default_rng(0)
    cap, dim = 37, 4
    bank = MemoryBank(cap, dim)
    ref: list[tuple[list[float], int]] = []
    for _ in range(10_000):
        if rng.random() < 0.6:
            n = int(rng.integers(0, 50))
            emb, tags = unit(rng, n, dim), rng.integers(0, 2, n)
            bank_push(bank, emb, tags)
            ref.extend(zip(emb.tolist(), tags.tolist()))
            ref = ref[-cap:]
        else:
            c = int(rng.integers(0, 2))
            got = bank_negatives(bank, c).tolist()
            assert got == [e for e, t in ref if t != c]
            assert bank.positives(c).tolist() == [e for e, t in ref if t == c]
        assert len(bank) == len(ref)


def test_bank_rejects_non_unit_and_mismatch():
    bank = MemoryBank(4, 2)
    with pytest.raises(ValueError, match="unit-norm"):
        bank.push(torch.tensor([[2.0, 0.0]]), [0])
    with pytest.raises(ValueError):
        bank.push(torch.tensor([[1.0, 0.0]]), [0, 1])
    with pytest.raises(ValueError):
        MemoryBank(0, 2)


def test_bank_state_roundtrip():
    rng = np.random.default_rng(3)
    bank = MemoryBank(5, 3).push(unit(rng, 7, 3), rng.integers(0, 2, 7))
    clone = MemoryBank.from_state_dict(bank.state_dict())
    for a, b in zip(bank.entries(), clone.entries()):
        assert torch.equal(a, b)
    assert clone.write_cursor == bank.write_cursor
