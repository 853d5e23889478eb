"""Pseudo-label selection, anchor sampling and the contrastive memory bank.

Probability tensors carry the class axis at dim 0 when 1-D (one distribution)
and at dim 1 otherwise (``[B, K]`` or ``[B, K, H, W]``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


def _class_dim(p: torch.Tensor) -> int:
    return 0 if p.dim() == 1 else 1


def entropy(p, epsilon: float = 1e-8) -> torch.Tensor:
    """Shannon entropy in nats, ``-sum p ln(p + eps)``; zero-probability terms contribute nothing."""
    p = torch.as_tensor(p)
    if (p < 0).any():
        raise ValueError("probabilities must be non-negative")
    terms = torch.where(p > 0, p * torch.log(p + epsilon), torch.zeros_like(p))
    return (-terms.sum(dim=_class_dim(p))).clamp_min(0.0)


@dataclass
class GateDecision:
    confidence: torch.Tensor
    uncertainty: torch.Tensor
    accepted: torch.Tensor  # bool

    @property
    def weight(self) -> torch.Tensor:
        return self.accepted.to(self.confidence.dtype)

    @property
    def fraction(self) -> float:
        n = self.accepted.numel()
        return float(self.accepted.sum()) / n if n else 0.0


def dual_threshold_gate(weak_probs, kappa: float, tau: float, epsilon: float = 1e-8) -> GateDecision:
    """Accept where entropy <= kappa and max probability >= tau."""
    p = torch.as_tensor(weak_probs)
    confidence = p.amax(dim=_class_dim(p))
    uncertainty = entropy(p, epsilon)
    accepted = (uncertainty <= kappa) & (confidence >= tau)
    return GateDecision(confidence, uncertainty, accepted)


def make_pseudo_labels(weak_probs) -> torch.Tensor:
    """Hard argmax over classes; ties go to the lower class index."""
    p = torch.as_tensor(weak_probs).detach()
    return p.argmax(dim=_class_dim(p))


def downsample_labels(labels: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour downsampling of ``[B, H, W]`` maps, sampling the centre of each cell."""
    h, w = labels.shape[-2:]
    rows = (torch.arange(size[0]) * h // size[0]) + h // (2 * size[0])
    cols = (torch.arange(size[1]) * w // size[1]) + w // (2 * size[1])
    return labels[..., rows[:, None], cols[None, :]]


@dataclass
class AnchorSet:
    """Flat positions (into the flattened candidate maps) and their pseudo-classes."""

    hard: np.ndarray
    hard_classes: np.ndarray
    simple: np.ndarray
    simple_classes: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        return np.concatenate([self.hard, self.simple])

    @property
    def classes(self) -> np.ndarray:
        return np.concatenate([self.hard_classes, self.simple_classes])

    def __len__(self) -> int:
        return len(self.hard) + len(self.simple)


def stride_mask(shape: tuple[int, ...], stride: int) -> np.ndarray:
    """True on the sub-grid of every ``stride``-th row and column of the last two axes."""
    keep = np.zeros(shape, dtype=bool)
    keep[..., ::stride, ::stride] = True
    return keep


def sample_anchors(accepted, pseudo, weak_pred, strong_pred, n: int, rng: np.random.Generator, stride: int = 1) -> AnchorSet:
    """Draw up to ``n/2`` hard (weak != strong) and ``n/2`` simple accepted positions.

    A pool short of ``n/2`` is taken whole and the other pool fills the gap.
    """
    if n % 2:
        raise ValueError("n must be even")
    acc = np.asarray(accepted, dtype=bool)
    if stride > 1:
        acc = acc & stride_mask(acc.shape, stride)
    acc = acc.ravel()
    pseudo = np.asarray(pseudo).ravel()
    disagree = np.asarray(weak_pred).ravel() != np.asarray(strong_pred).ravel()
    hard_pool = np.flatnonzero(acc & disagree)
    simple_pool = np.flatnonzero(acc & ~disagree)
    half = n // 2
    n_hard = min(len(hard_pool), half)
    n_simple = min(len(simple_pool), half)
    if n_hard < half:
        n_simple = min(len(simple_pool), n - n_hard)
    elif n_simple < half:
        n_hard = min(len(hard_pool), n - n_simple)
    hard = np.sort(rng.choice(hard_pool, size=n_hard, replace=False)) if n_hard else hard_pool[:0]
    simple = np.sort(rng.choice(simple_pool, size=n_simple, replace=False)) if n_simple else simple_pool[:0]
    return AnchorSet(hard, pseudo[hard], simple, pseudo[simple])


class MemoryBank:
    """Fixed-capacity FIFO ring buffer of unit-norm embeddings tagged with a class."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.embeddings = torch.zeros(capacity, dim, dtype=dtype)
        self.tags = torch.zeros(capacity, dtype=torch.long)
        self.write_cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, embeddings: torch.Tensor, tags, tol: float = 1e-4) -> "MemoryBank":
        emb = torch.as_tensor(embeddings).detach().reshape(-1, self.dim).to(self.embeddings.dtype)
        tags = torch.as_tensor(tags, dtype=torch.long).reshape(-1)
        if len(emb) != len(tags):
            raise ValueError("embeddings and tags differ in length")
        if len(emb) == 0:
            return self
        norms = emb.norm(dim=1)
        if ((norms - 1).abs() > tol).any():
            raise ValueError(f"memory bank entries must be unit-norm (max deviation {float((norms - 1).abs().max()):.2e})")
        if len(emb) > self.capacity:
            emb, tags = emb[-self.capacity :], tags[-self.capacity :]
        slots = (self.write_cursor + torch.arange(len(emb))) % self.capacity
        self.embeddings[slots] = emb
        self.tags[slots] = tags
        self.write_cursor = int((self.write_cursor + len(emb)) % self.capacity)
        self.size = min(self.capacity, self.size + len(emb))
        return self

    def _order(self) -> torch.Tensor:
        start = self.write_cursor if self.size == self.capacity else 0
        return (start + torch.arange(self.size)) % self.capacity

    def entries(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Stored embeddings and tags, oldest first."""
        order = self._order()
        return self.embeddings[order], self.tags[order]

    def negatives(self, anchor_class: int) -> torch.Tensor:
        emb, tags = self.entries()
        return emb[tags != anchor_class]

    def positives(self, anchor_class: int) -> torch.Tensor:
        emb, tags = self.entries()
        return emb[tags == anchor_class]

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "embeddings": self.embeddings.clone(),
            "tags": self.tags.clone(),
            "write_cursor": self.write_cursor,
            "size": self.size,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        bank = cls(state["capacity"], state["dim"], state["embeddings"].dtype)
        bank.embeddings.copy_(state["embeddings"])
        bank.tags.copy_(state["tags"])
        bank.write_cursor = state["write_cursor"]
        bank.size = state["size"]
        return bank


def bank_push(bank: MemoryBank, embeddings, tags) -> MemoryBank:
    return bank.push(embeddings, tags)


def bank_negatives(bank: MemoryBank, anchor_class: int) -> torch.Tensor:
    return bank.negatives(anchor_class)
