"""Training loop, evaluation, checkpoints and metrics logging."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import data as hdata
from .core import ScheduleState, TrainConfig, confidence_threshold, poly_lr, uncertainty_threshold
from .losses import (
    LossReport,
    image_contrastive_loss,
    inter_task_consistency_loss,
    pixel_contrastive_loss,
    supervised_cls_loss,
    supervised_seg_loss,
    total_loss,
    unsup_cls_loss,
    unsup_seg_loss,
)
from .model import HermesModel
from .pseudo import MemoryBank, downsample_labels, dual_threshold_gate, make_pseudo_labels, sample_anchors

log = logging.getLogger(__name__)

# stream ids mixed into per-iteration seeds
_DATA_STREAM, _AUG_STREAM, _ANCHOR_STREAM = 1, 2, 3


@dataclass
class LabeledBatch:
    images: torch.Tensor  # [B, 3, H, W]
    masks: torch.Tensor  # [B, H, W] long
    labels: torch.Tensor  # [B] long

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class UnlabeledBatch:
    weak: torch.Tensor
    strong: torch.Tensor

    def __len__(self) -> int:
        return self.weak.shape[0]


@dataclass
class Schedule:
    kappa: float
    tau: float
    lr_seg: float
    lr_cls: float


def schedule_at(config: TrainConfig, it: int) -> Schedule:
    """Thresholds and learning rates at iteration ``it``; a pure function of ``(config, it)``."""
    st = ScheduleState(it, max(config.total_iters, 1))
    return Schedule(
        kappa=uncertainty_threshold(st, config.eta_min, config.eta_max),
        tau=confidence_threshold(st),
        lr_seg=poly_lr(st, config.lr_init),
        lr_cls=poly_lr(st, config.lr_cls),
    )


class TrainState:
    """Model, the two optimizers, memory banks and the iteration counter."""

    def __init__(self, config: TrainConfig, model: HermesModel | None = None):
        self.config = config
        if model is None:
            torch.manual_seed(config.seed)
            model = HermesModel.from_config(config)
        self.model = model
        self.opt_seg = torch.optim.Adam(model.seg_parameters(), lr=config.lr_init)
        self.opt_cls = torch.optim.SGD(
            model.cls_parameters(), lr=config.lr_cls, momentum=config.momentum, weight_decay=config.weight_decay
        )
        self.iter = 0
        self.pixel_bank = MemoryBank(config.bank_capacity_pixel, config.pixel_embed_dim)
        self.image_bank = MemoryBank(config.bank_capacity_image, config.image_embed_dim)

    @property
    def optimizers(self) -> tuple[torch.optim.Optimizer, torch.optim.Optimizer]:
        return self.opt_seg, self.opt_cls

    def state_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "model": self.model.state_dict(),
            "opt_seg": self.opt_seg.state_dict(),
            "opt_cls": self.opt_cls.state_dict(),
            "iter": self.iter,
            "pixel_bank": self.pixel_bank.state_dict(),
            "image_bank": self.image_bank.state_dict(),
        }

    @classmethod
    def from_state_dict(cls, blob: dict, config: TrainConfig | None = None) -> "TrainState":
        config = config or TrainConfig(**blob["config"])
        model = HermesModel.from_config(config)
        model.load_state_dict(blob["model"])
        state = cls(config, model)
        state.opt_seg.load_state_dict(blob["opt_seg"])
        state.opt_cls.load_state_dict(blob["opt_cls"])
        state.iter = blob["iter"]
        state.pixel_bank = MemoryBank.from_state_dict(blob["pixel_bank"])
        state.image_bank = MemoryBank.from_state_dict(blob["image_bank"])
        return state


# -- batches ---------------------------------------------------------------------


def _pick(ids: list[str], k: int, rng: np.random.Generator) -> list[str]:
    if not ids or k == 0:
        return []
    idx = rng.choice(len(ids), size=k, replace=len(ids) < k)
    return [ids[i] for i in idx]


def draw_batches(index: hdata.DatasetIndex, config: TrainConfig, it: int) -> tuple[LabeledBatch, UnlabeledBatch]:
    """Half-labeled, half-unlabeled batch for iteration ``it``; depends only on ``(seed, it)``."""
    half = config.batch_size // 2
    pick_rng = np.random.default_rng([config.seed, it, _DATA_STREAM])
    aug_rng = np.random.default_rng([config.seed, it, _AUG_STREAM])
    size = config.image_size
    imgs, masks, labels = [], [], []
    for s in index.get(_pick(index.labeled, half, pick_rng)):
        view, _, mask = hdata.augment_weak(s, aug_rng, size)
        imgs.append(view)
        masks.append(mask)
        labels.append(s.class_label)
    weak, strong = [], []
    for s in index.get(_pick(index.unlabeled, half, pick_rng)):
        view, _, _ = hdata.augment_weak(s, aug_rng, size)
        weak.append(view)
        strong.append(hdata.augment_strong(view, aug_rng))

    def stack(arrs, shape, dtype=torch.float32):
        return torch.from_numpy(np.stack(arrs)).to(dtype) if arrs else torch.zeros(shape, dtype=dtype)

    lab = LabeledBatch(
        stack(imgs, (0, 3, size, size)),
        stack(masks, (0, size, size), torch.long),
        torch.tensor(labels, dtype=torch.long),
    )
    unl = UnlabeledBatch(stack(weak, (0, 3, size, size)), stack(strong, (0, 3, size, size)))
    return lab, unl


# -- one optimisation step ---------------------------------------------------------


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, labeled: LabeledBatch, unlabeled: UnlabeledBatch) -> LossReport:
    cfg = state.config
    if state.iter >= cfg.total_iters:
        raise RuntimeError(f"training already finished ({state.iter}/{cfg.total_iters} iterations)")
    sched = schedule_at(cfg, state.iter)
    model = state.model
    model.train()
    if len(labeled) == 0:
        raise ValueError("train_step needs at least one labeled image")
    nu = len(unlabeled) if cfg.enable_unlabeled else 0
    # labeled and unlabeled images go through separate forwards so batch-norm statistics of the
    # supervised pass never depend on the unlabeled views
    lab = model(labeled.images, with_saliency=cfg.enable_ias, with_attention=cfg.enable_ias)
    comps = {
        "seg_sup": supervised_seg_loss(lab.seg_logits, labeled.masks),
        "cls_sup": supervised_cls_loss(lab.cls_logits, labeled.labels),
    }
    zero = comps["seg_sup"] * 0.0
    for k in ("seg_unsup", "cls_unsup", "pixel_contrast", "image_contrast", "itc"):
        comps[k] = zero
    counts = {"accepted_pixel_fraction": 0.0, "accepted_image_fraction": 0.0, "pixel_anchors": 0, "hard_anchors": 0}
    push = []
    if nu:
        out = model(torch.cat([unlabeled.weak, unlabeled.strong]), with_saliency=cfg.enable_ias, with_attention=cfg.enable_ias)
        weak, strong = out[:nu], out[nu:]
        weak_seg = weak.seg_logits.softmax(dim=1).detach()
        strong_seg = strong.seg_logits.softmax(dim=1)
        gate_seg = dual_threshold_gate(weak_seg, sched.kappa, sched.tau, cfg.epsilon)
        weak_cls = weak.cls_logits.softmax(dim=1).detach()
        gate_cls = dual_threshold_gate(weak_cls, sched.kappa, sched.tau, cfg.epsilon)
        cls_pseudo = make_pseudo_labels(weak_cls)
        comps["seg_unsup"] = unsup_seg_loss(strong_seg, weak_seg, gate_seg)
        comps["cls_unsup"] = unsup_cls_loss(strong.cls_logits, weak_cls, gate_cls)
        counts["accepted_pixel_fraction"] = gate_seg.fraction
        counts["accepted_image_fraction"] = gate_cls.fraction
        if cfg.enable_dtcl:
            emb_map = strong.pixel_embeds
            hw = emb_map.shape[-2:]
            pseudo_ds = downsample_labels(make_pseudo_labels(weak_seg), hw)
            anchors = sample_anchors(
                downsample_labels(gate_seg.accepted, hw),
                pseudo_ds,
                pseudo_ds,
                downsample_labels(strong_seg.detach().argmax(dim=1), hw),
                cfg.anchors_per_batch,
                np.random.default_rng([cfg.seed, state.iter, _ANCHOR_STREAM]),
                cfg.anchor_stride,
            )
            flat = emb_map.permute(0, 2, 3, 1).reshape(-1, emb_map.shape[1])
            anchor_emb = flat[torch.from_numpy(anchors.positions)]
            anchor_cls = torch.from_numpy(anchors.classes)
            comps["pixel_contrast"] = pixel_contrastive_loss(anchor_emb, anchor_cls, state.pixel_bank, cfg.temp)
            views = torch.cat([weak.image_embed, strong.image_embed])
            comps["image_contrast"] = image_contrastive_loss(views, cls_pseudo, gate_cls.accepted, cfg.temp, state.image_bank)
            counts["pixel_anchors"] = len(anchors)
            counts["hard_anchors"] = len(anchors.hard)
            keep = gate_cls.accepted
            push = [
                (state.pixel_bank, anchor_emb.detach(), anchor_cls),
                (state.image_bank, weak.image_embed.detach()[keep], cls_pseudo[keep]),
            ]
        if cfg.enable_itcl:
            comps["itc"] = inter_task_consistency_loss(
                torch.cat([weak.f_cls_proj, strong.f_cls_proj]), torch.cat([weak.f_seg_proj, strong.f_seg_proj])
            )
    total = total_loss(comps, cfg)
    for opt in state.optimizers:
        opt.zero_grad(set_to_none=True)
    total.backward()
    _set_lr(state.opt_seg, sched.lr_seg)
    _set_lr(state.opt_cls, sched.lr_cls)
    state.opt_seg.step()
    state.opt_cls.step()
    for bank, emb, tags in push:
        bank.push(emb, tags)
    state.iter += 1
    report = LossReport(**{k: float(v.detach()) for k, v in comps.items()}, total=float(total.detach()), counts=counts)
    return report


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    dice_mean: float
    dice_std: float
    iou_mean: float
    accuracy: float
    n_images: int

    def to_dict(self) -> dict:
        return asdict(self)


def dice_statistics(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def overlap_scores(pred: np.ndarray, truth: np.ndarray, smooth: float = 1.0) -> tuple[float, float]:
    """Per-image (Dice, IoU) of binary masks with additive smoothing on the counts."""
    p, t = pred.astype(bool), truth.astype(bool)
    inter = np.logical_and(p, t).sum()
    dice = (2.0 * inter + smooth) / (p.sum() + t.sum() + smooth)
    iou = (inter + smooth) / (np.logical_or(p, t).sum() + smooth)
    return float(dice), float(iou)


def evaluate(model: HermesModel, samples: list[hdata.Sample], config: TrainConfig | None = None, batch_size: int = 32) -> EvalReport:
    """Argmax-mask Dice/IoU per image and image-level accuracy, without augmentation."""
    if not samples:
        raise ValueError("evaluation set is empty")
    if any(not s.labeled for s in samples):
        raise ValueError("evaluation samples must be labeled")
    ias = True if config is None else config.enable_ias
    model.eval()
    dices, ious, correct = [], [], 0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x = torch.from_numpy(np.stack([s.image for s in chunk])).float()
            out = model(x, with_saliency=ias, with_attention=ias)
            masks = out.seg_logits.argmax(dim=1).numpy()
            preds = out.cls_logits.argmax(dim=1).numpy()
            for s, m, c in zip(chunk, masks, preds):
                d, i = overlap_scores(m, s.mask)
                dices.append(d)
                ious.append(i)
                correct += int(c == s.class_label)
    mean, std = dice_statistics(dices)
    return EvalReport(mean, std, float(np.mean(ious)), correct / len(samples), len(samples))


# -- fit -------------------------------------------------------------------------


def build_index(config: TrainConfig) -> hdata.DatasetIndex:
    """Scan ``config.data_root`` (or synthesise ``n_synth`` images) and split by the config."""
    if config.data_root:
        base = hdata.scan_dataset(config.data_root, config.image_size)
    else:
        base = hdata.index_from_samples(hdata.synth_generate(config.n_synth, config.image_size, config.seed))
    return hdata.split_labeled(base, config.n_labeled, config.val_fraction, config.seed)


def save_checkpoint(state: TrainState, path: str | Path, metrics: dict | None = None) -> Path:
    """Write ``<path>`` (torch blob) and ``<path>.json`` manifest ``{config_digest, iteration, metrics}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state.state_dict(), path)
    manifest = {"config_digest": state.config.digest(), "iteration": state.iter, "metrics": metrics or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001
        raise RuntimeError(f"cannot read checkpoint {path}: {exc}") from exc
    return TrainState.from_state_dict(blob)


@dataclass
class FitResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_path: Path
    final_eval: EvalReport
    best_eval: EvalReport


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def fit(config: TrainConfig, out_dir: str | Path, index: hdata.DatasetIndex | None = None, resume: str | Path | None = None) -> FitResult:
    """Run ``total_iters`` train steps with periodic evaluation and checkpointing.

    Writes ``metrics.jsonl`` (one ``step`` line per iteration plus one ``eval`` line per
    evaluation), ``best.pt`` (highest validation Dice) and ``last.pt`` (resumable state).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = index if index is not None else build_index(config)
    val = index.get(index.val) or index.get(index.labeled)
    if resume is not None:
        state = load_checkpoint(resume)
        if state.config.digest() != config.digest():
            raise ValueError(f"checkpoint {resume} was produced by a different config")
    else:
        state = TrainState(config)
    metrics_path = out_dir / "metrics.jsonl"
    best_path, last_path = out_dir / "best.pt", out_dir / "last.pt"
    best = None
    if resume is not None and best_path.with_suffix(".json").exists():
        best = EvalReport(**json.loads(best_path.with_suffix(".json").read_text())["metrics"])

    with open(metrics_path, "a" if resume is not None else "w") as sink:

        def emit(record: dict) -> None:
            sink.write(json.dumps({k: _jsonable(v) for k, v in record.items()}, sort_keys=True) + "\n")
            sink.flush()

        def run_eval() -> EvalReport:
            nonlocal best
            report = evaluate(state.model, val, config)
            sched = schedule_at(config, state.iter)
            emit({"kind": "eval", "iter": state.iter, "lr": sched.lr_seg, "kappa": sched.kappa, "tau": sched.tau, **report.to_dict()})
            if best is None or report.dice_mean > best.dice_mean:
                best = report
                save_checkpoint(state, best_path, report.to_dict())
            return report

        final = None
        if config.total_iters == 0:
            final = run_eval()
        while state.iter < config.total_iters:
            sched = schedule_at(config, state.iter)
            lab, unl = draw_batches(index, config, state.iter)
            report = train_step(state, lab, unl)
            emit({"kind": "step", "iter": state.iter - 1, "lr": sched.lr_seg, "lr_cls": sched.lr_cls,
                  "kappa": sched.kappa, "tau": sched.tau, **report.to_dict()})
            if state.iter % config.eval_interval == 0 or state.iter == config.total_iters:
                final = run_eval()
                log.info("iter %d dice %.4f acc %.4f", state.iter, final.dice_mean, final.accuracy)
        if final is None:  # resumed from a finished run
            final = evaluate(state.model, val, config)
    save_checkpoint(state, last_path, final.to_dict())
    return FitResult(best_path, last_path, metrics_path, final, best or final)


# -- pseudo-label selection experiment ----------------------------------------------

PL_STRATEGIES = ("none", "conf", "dual")


def synth_features(n: int, seed: int, dim: int = 16, noise: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved half-moons, randomly rotated into ``dim`` dimensions with isotropic noise."""
    rng = np.random.default_rng([seed, n, dim])
    y = rng.integers(0, 2, size=n)
    t = rng.uniform(0, np.pi, size=n)
    xy = np.stack([np.cos(t), np.sin(t)], axis=1)
    xy[y == 1] = np.stack([1 - np.cos(t[y == 1]), 0.5 - np.sin(t[y == 1])], axis=1)
    x = np.zeros((n, dim))
    x[:, :2] = xy
    x += noise * rng.standard_normal((n, dim))
    rot, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return (x @ rot).astype(np.float32), y


def _select(strategy: str, probs: torch.Tensor, epoch: int, epochs: int, config: TrainConfig, conf_tau: float) -> torch.Tensor:
    if strategy == "none":
        return torch.ones(len(probs), dtype=torch.bool)
    if strategy == "conf":
        return probs.amax(dim=1) >= conf_tau
    state = ScheduleState(epoch, epochs)
    kappa = uncertainty_threshold(state, config.eta_min, config.eta_max)
    return dual_threshold_gate(probs, kappa, confidence_threshold(state), config.epsilon).accepted


def pl_accuracy_experiment(
    config: TrainConfig,
    n_samples: int = 2000,
    n_labeled: int = 50,
    epochs: int = 40,
    features: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    hidden: int = 64,
    lr: float = 0.01,
    batch_size: int = 64,
    strong_noise: float = 0.3,
    conf_tau: float = 0.95,
) -> list[dict]:
    """Self-training curves for three pseudo-label selection strategies.

    All three classifiers start from the same weights and see the same batches;
    they differ only in which pseudo-labels pass. At the start of every epoch the
    current model labels the unlabeled pool; the accuracy of the accepted labels
    against the hidden truth and the accepted fraction are recorded, then one epoch
    of training on labeled data plus accepted pseudo-labels (on noise-perturbed
    inputs) follows. Returns rows ``{epoch, strategy, pl_accuracy, coverage}``.
    """
    if features is None:
        features, labels = synth_features(n_samples, config.seed)
    x = torch.as_tensor(features, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    n = len(x)
    order = np.random.default_rng([config.seed, n]).permutation(n)
    lab_idx, unl_idx = torch.as_tensor(order[:n_labeled]), torch.as_tensor(order[n_labeled:])
    torch.manual_seed(config.seed)
    init = torch.nn.Sequential(
        torch.nn.Linear(x.shape[1], hidden), torch.nn.ReLU(),
        torch.nn.Linear(hidden, hidden), torch.nn.ReLU(),
        torch.nn.Linear(hidden, config.num_classes),
    )
    nets = {s: copy.deepcopy(init) for s in PL_STRATEGIES}
    opts = {s: torch.optim.SGD(nets[s].parameters(), lr=lr, momentum=0.9) for s in PL_STRATEGIES}
    rows = []
    for epoch in range(epochs):
        gen = torch.Generator().manual_seed(config.seed * 100_003 + epoch)
        perm = torch.randperm(len(unl_idx), generator=gen)
        lab_draws = torch.randint(0, n_labeled, (len(perm),), generator=gen)
        noise = strong_noise * torch.randn(2, len(perm), x.shape[1], generator=gen)
        for s in PL_STRATEGIES:
            net, opt = nets[s], opts[s]
            with torch.no_grad():
                probs = net(x[unl_idx]).softmax(dim=1)
            pseudo = probs.argmax(dim=1)
            accepted = _select(s, probs, epoch, epochs, config, conf_tau)
            n_acc = int(accepted.sum())
            correct = (pseudo == y[unl_idx])[accepted]
            rows.append({
                "epoch": epoch + 1,
                "strategy": s,
                "pl_accuracy": float(correct.float().mean()) if n_acc else float("nan"),
                "coverage": n_acc / len(unl_idx),
            })
            w = accepted.float()
            for start in range(0, len(perm), batch_size):
                b = perm[start : start + batch_size]
                lb = lab_idx[lab_draws[start : start + batch_size]]
                sup = F.cross_entropy(net(x[lb] + noise[0, start : start + len(b)]), y[lb])
                ce = F.cross_entropy(net(x[unl_idx[b]] + noise[1, start : start + len(b)]), pseudo[b], reduction="none")
                loss = sup + (w[b] * ce).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
    return rows


def write_pl_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "strategy", "pl_accuracy", "coverage"])
        writer.writeheader()
        writer.writerows(rows)
    return path


def late_mean_accuracy(rows: list[dict], strategy: str) -> float:
    """Mean pseudo-label accuracy over the last half of the epochs (epochs with no accepted label skipped)."""
    epochs = max(r["epoch"] for r in rows)
    vals = [r["pl_accuracy"] for r in rows if r["strategy"] == strategy and r["epoch"] > epochs // 2]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")
