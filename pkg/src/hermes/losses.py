"""Training objectives: supervised, gated unsupervised, contrastive, inter-task consistency."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

from .pseudo import GateDecision, MemoryBank, make_pseudo_labels

log = logging.getLogger(__name__)

COMPONENTS = ("seg_sup", "cls_sup", "seg_unsup", "cls_unsup", "pixel_contrast", "image_contrast", "itc")


def _zero(like: torch.Tensor) -> torch.Tensor:
    # keeps the graph (and dtype/device) so callers can always backprop
    return like.sum() * 0.0


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """``1 - (2 sum(p t) + s) / (sum p + sum t + s)`` over the last two axes."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def supervised_seg_loss(seg_logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Per-image pixel-mean cross-entropy plus soft Dice, summed and divided by ``2|batch|``."""
    if masks is None:
        raise ValueError("labeled batch is missing masks")
    n = seg_logits.shape[0]
    if n == 0:
        return _zero(seg_logits)
    masks = masks.long()
    ce = F.cross_entropy(seg_logits, masks, reduction="none").mean(dim=(1, 2))
    dice = dice_loss(seg_logits.softmax(dim=1)[:, 1], masks)
    return (ce + dice).sum() / (2 * n)


def supervised_cls_loss(cls_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels is None:
        raise ValueError("labeled batch is missing class labels")
    if cls_logits.shape[0] == 0:
        return _zero(cls_logits)
    return F.cross_entropy(cls_logits, labels.long())


def unsup_seg_loss(strong_probs: torch.Tensor, weak_probs: torch.Tensor, gate: GateDecision) -> torch.Tensor:
    """Dice between the strong foreground probability and the weak pseudo-mask on accepted pixels."""
    if strong_probs.shape[0] == 0:
        return _zero(strong_probs)
    w = gate.accepted.to(strong_probs.dtype)
    pseudo = make_pseudo_labels(weak_probs).to(strong_probs.dtype)
    return dice_loss(strong_probs[:, 1] * w, pseudo * w).mean()


def unsup_cls_loss(strong_logits: torch.Tensor, weak_probs: torch.Tensor, gate: GateDecision) -> torch.Tensor:
    """Gated cross-entropy to the weak pseudo-label, averaged over all images (rejected count as 0)."""
    n = strong_logits.shape[0]
    if n == 0:
        return _zero(strong_logits)
    w = gate.accepted.to(strong_logits.dtype)
    ce = F.cross_entropy(strong_logits, make_pseudo_labels(weak_probs), reduction="none")
    return (w * ce).sum() / n


def _bank_entries(bank, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if bank is None:
        return like.new_zeros(0, like.shape[1]), torch.zeros(0, dtype=torch.long)
    emb, tags = bank.entries() if isinstance(bank, MemoryBank) else bank
    return emb.detach().to(like.dtype), torch.as_tensor(tags, dtype=torch.long)


def pixel_contrastive_loss(anchor_embeds: torch.Tensor, anchor_classes, bank=None, temp: float = 0.07) -> torch.Tensor:
    """Class-aware InfoNCE over sampled accepted anchors, with optional memory-bank keys.

    Each anchor's positives are the other anchors of its class plus bank entries of
    its class; negatives are anchors and bank entries of any other class. Every
    positive gets its own term ``-log(e^{s+} / (e^{s+} + sum e^{s-}))``; terms are
    averaged per anchor, then over anchors with at least one positive.
    """
    classes = torch.as_tensor(anchor_classes, dtype=torch.long).reshape(-1)
    a = len(classes)
    if a == 0:
        return _zero(anchor_embeds)
    bank_emb, bank_tags = _bank_entries(bank, anchor_embeds)
    keys = torch.cat([anchor_embeds, bank_emb])
    key_cls = torch.cat([classes, bank_tags])
    sim = anchor_embeds @ keys.T / temp
    same = classes[:, None] == key_cls[None, :]
    not_self = torch.ones_like(same)
    not_self[:, :a] &= ~torch.eye(a, dtype=torch.bool)
    pos = same & not_self
    neg = ~same
    shift = sim.detach().amax(dim=1, keepdim=True)
    z = sim - shift
    neg_sum = (z.exp() * neg).sum(dim=1, keepdim=True)
    log_prob = z - torch.log(z.exp() + neg_sum)
    n_pos = pos.sum(dim=1)
    valid = n_pos > 0
    if not valid.any():
        return _zero(anchor_embeds)
    per_anchor = -(log_prob * pos).sum(dim=1)[valid] / n_pos[valid]
    return per_anchor.mean()


def image_contrastive_loss(view_embeds: torch.Tensor, pseudo_classes, accepted, temp: float = 0.07, bank=None) -> torch.Tensor:
    """Two-view contrastive loss with pseudo-class positives across accepted images.

    ``view_embeds`` is ``[2N, D]``: rows ``k`` and ``k + N`` are the two views of image ``k``.
    A view's positives are its partner view (always) plus the views of other images
    whose pseudo-class matches, when both images pass the gate. The denominator is
    every other view; with a bank, accepted anchors also see bank entries of other
    classes as negatives.
    """
    classes = torch.as_tensor(pseudo_classes, dtype=torch.long).reshape(-1)
    acc = torch.as_tensor(accepted, dtype=torch.bool).reshape(-1)
    n = len(classes)
    if view_embeds.shape[0] != 2 * n:
        raise ValueError(f"expected {2 * n} view embeddings, got {view_embeds.shape[0]}")
    if n == 0:
        return _zero(view_embeds)
    img = torch.arange(2 * n) % n
    cls2, acc2 = classes[img], acc[img]
    sim = view_embeds @ view_embeds.T / temp
    eye = torch.eye(2 * n, dtype=torch.bool)
    partner = (img[:, None] == img[None, :]) & ~eye
    cross = (img[:, None] != img[None, :]) & (cls2[:, None] == cls2[None, :]) & acc2[:, None] & acc2[None, :]
    pos = partner | cross
    bank_emb, bank_tags = _bank_entries(bank, view_embeds)
    bank_sim = view_embeds @ bank_emb.T / temp
    bank_neg = acc2[:, None] & (bank_tags[None, :] != cls2[:, None])
    shift = torch.cat([sim, bank_sim], dim=1).detach().amax(dim=1, keepdim=True)
    denom = ((sim - shift).exp() * ~eye).sum(dim=1) + ((bank_sim - shift).exp() * bank_neg).sum(dim=1)
    log_prob = (sim - shift) - torch.log(denom)[:, None]
    per_anchor = -(log_prob * pos).sum(dim=1) / pos.sum(dim=1)
    return per_anchor.mean()


def inter_task_consistency_loss(f_cls: torch.Tensor, f_seg: torch.Tensor) -> torch.Tensor:
    """Mean of ``1 - cos(f_cls, f_seg)``; a zero vector counts as cosine 0."""
    if f_cls.dim() == 1:
        f_cls, f_seg = f_cls[None], f_seg[None]
    if f_cls.shape[0] == 0:
        return _zero(f_cls)
    norms = f_cls.norm(dim=1) * f_seg.norm(dim=1)
    degenerate = norms == 0
    if degenerate.any():
        log.warning("inter-task consistency: %d zero-norm feature pair(s) treated as cosine 0", int(degenerate.sum()))
    cos = (f_cls * f_seg).sum(dim=1) / torch.where(degenerate, torch.ones_like(norms), norms)
    return (1.0 - cos).mean()


@dataclass
class LossReport:
    seg_sup: float = 0.0
    cls_sup: float = 0.0
    seg_unsup: float = 0.0
    cls_unsup: float = 0.0
    pixel_contrast: float = 0.0
    image_contrast: float = 0.0
    itc: float = 0.0
    total: float = 0.0
    counts: dict = field(default_factory=dict)

    def components(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in COMPONENTS}

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(out.pop("counts"))
        return out


def total_loss(components: Mapping[str, torch.Tensor | float] | LossReport, config):
    """Weighted sum of the seven components; disabled ablation terms are dropped before weighting."""
    c = components.components() if isinstance(components, LossReport) else components
    unlab = config.enable_unlabeled
    seg = c["seg_sup"]
    cls = c["cls_sup"]
    if unlab:
        seg = seg + c["seg_unsup"]
        cls = cls + c["cls_unsup"]
        if config.enable_dtcl:
            seg = seg + config.alpha * c["pixel_contrast"]
            cls = cls + config.beta * c["image_contrast"]
    total = config.lambda_seg * seg + config.lambda_cls * cls
    if unlab and config.enable_itcl:
        total = total + config.gamma * c["itc"]
    return total
