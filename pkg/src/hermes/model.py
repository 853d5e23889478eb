"""Dual-branch segmentation/classification network with inter-task attention and saliency.

Feature scales, relative to the input side ``S`` (``S`` a multiple of 32):

* segmentation encoder: stem ``S``, stages ``S/4, S/8, S/16, S/32``
* segmentation decoder: stages ``S/16, S/8, S/4, S`` (saliency fused at the third)
* classification backbone: stages ``S/4, S/8, S/16, S/32`` (attention after the third)

Pixel embeddings come from the third encoder stage (``S/16``).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def _norm(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            _norm(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            _norm(cout),
            nn.ReLU(inplace=True),
        )


class SegBranch(nn.Module):
    """U-Net with four downsampling stages (the first one by 4)."""

    def __init__(self, width: int = 32, num_classes: int = 2):
        super().__init__()
        w = width
        self.stem = ConvBlock(3, w)
        self.down = nn.ModuleList([ConvBlock(w, 2 * w), ConvBlock(2 * w, 4 * w), ConvBlock(4 * w, 8 * w), ConvBlock(8 * w, 8 * w)])
        self.pools = (4, 2, 2, 2)
        self.up = nn.ModuleList([ConvBlock(16 * w, 4 * w), ConvBlock(8 * w, 2 * w), ConvBlock(4 * w, w), ConvBlock(2 * w, w)])
        self.head = nn.Conv2d(w, num_classes, 1)
        self.channels = {"mid": 8 * w, "deep": 8 * w, "fuse": w}

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        for pool, block in zip(self.pools, self.down):
            feats.append(block(F.max_pool2d(feats[-1], pool)))
        return feats

    def decode(self, feats: list[torch.Tensor], fuse=None) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Decode encoder features; ``fuse`` (if given) is applied to the third decoder stage."""
        x = feats[-1]
        dec = []
        for k, block in enumerate(self.up):
            skip = feats[3 - k]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
            if k == 2 and fuse is not None:
                x = fuse(x)
            dec.append(x)
        return self.head(x), dec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))[0]


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class ClsBranch(nn.Module):
    """ResNet-18-shaped backbone; ``width`` is the first stage's channel count (64 in ResNet-18)."""

    def __init__(self, width: int = 32, blocks: int = 2, num_classes: int = 2):
        super().__init__()
        c = width
        self.stem = nn.Sequential(nn.Conv2d(3, c, 7, 2, 3, bias=False), _norm(c), nn.ReLU(inplace=True), nn.MaxPool2d(3, 2, 1))
        chans = [c, 2 * c, 4 * c, 8 * c]
        layers, cin = [], c
        for k, cout in enumerate(chans):
            stage = [BasicBlock(cin, cout, 1 if k == 0 else 2)] + [BasicBlock(cout, cout) for _ in range(blocks - 1)]
            layers.append(nn.Sequential(*stage))
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.fc = nn.Linear(8 * c, num_classes)
        self.channels = {"mid": 4 * c, "pooled": 8 * c}

    def forward(self, x: torch.Tensor, x_seg: torch.Tensor | None = None, attention: "InterTaskAttention | None" = None):
        """Return ``(logits, pooled_features)``; attention gates the third stage when given."""
        h = self.stem(x)
        for k, layer in enumerate(self.layers):
            h = layer(h)
            if k == 2 and attention is not None:
                h = attention(h, x_seg)
        pooled = h.mean(dim=(2, 3))
        return self.fc(pooled), pooled


# -- inter-task attention ----------------------------------------------------------


class InterTaskAttention(nn.Module):
    """Channel gate from concatenated cls/seg features, then a spatial gate (avg+max over channels)."""

    def __init__(self, cls_channels: int, seg_channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(1, cls_channels // reduction)
        self.conv_c = nn.Conv2d(cls_channels + seg_channels, cls_channels, 3, padding=1, bias=True)
        self.mlp0 = nn.Linear(cls_channels, hidden, bias=False)
        self.mlp1 = nn.Linear(hidden, cls_channels, bias=False)
        self.conv_s = nn.Conv2d(2, 1, 3, padding=1, bias=True)

    def forward(self, x_cls: torch.Tensor, x_seg: torch.Tensor) -> torch.Tensor:
        m_c = channel_attention(x_cls, x_seg, self)
        m_s = spatial_attention(m_c * x_cls, self)
        return apply_attention(x_cls, m_c, m_s)


def _batched(*xs: torch.Tensor) -> tuple[bool, list[torch.Tensor]]:
    single = xs[0].dim() == 3
    return single, [x.unsqueeze(0) if single else x for x in xs]


def channel_attention(x_cls: torch.Tensor, x_seg: torch.Tensor, params: InterTaskAttention) -> torch.Tensor:
    """``sigmoid(W1 relu(W0 avgpool(conv3x3([x_cls; x_seg]) + b_c))))``, shape ``[(B,) C, 1, 1]``."""
    if x_cls.shape[-2:] != x_seg.shape[-2:] or x_cls.dim() != x_seg.dim():
        raise ValueError(f"spatial shapes differ: {tuple(x_cls.shape)} vs {tuple(x_seg.shape)}")
    single, (a, b) = _batched(x_cls, x_seg)
    pooled = params.conv_c(torch.cat([a, b], dim=1)).mean(dim=(2, 3))
    m_c = torch.sigmoid(params.mlp1(F.relu(params.mlp0(pooled))))[..., None, None]
    return m_c[0] if single else m_c


def spatial_attention(x_m: torch.Tensor, params: InterTaskAttention) -> torch.Tensor:
    """``sigmoid(conv3x3([mean_c(x_m); max_c(x_m)]) + b_s)``, shape ``[(B,) 1, h, w]``."""
    if x_m.shape[-3] != params.mlp1.out_features:
        raise ValueError(f"expected {params.mlp1.out_features} channels, got {x_m.shape[-3]}")
    single, (x,) = _batched(x_m)
    planes = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
    m_s = torch.sigmoid(params.conv_s(planes))
    return m_s[0] if single else m_s


def apply_attention(x_cls: torch.Tensor, m_c: torch.Tensor, m_s: torch.Tensor) -> torch.Tensor:
    x_m = m_c * x_cls
    return m_s * x_m


# -- saliency --------------------------------------------------------------------


def normalize_saliency(grad: torch.Tensor) -> torch.Tensor:
    """``|grad|`` maxed over colour channels, min-max scaled per image; flat maps become zero."""
    sal = grad.abs().amax(dim=1, keepdim=True)
    lo = sal.amin(dim=(2, 3), keepdim=True)
    span = sal.amax(dim=(2, 3), keepdim=True) - lo
    return torch.where(span > 0, (sal - lo) / span.clamp_min(torch.finfo(sal.dtype).tiny), torch.zeros_like(sal))


def _selected_score(out: torch.Tensor) -> torch.Tensor:
    if out.dim() == 1:
        return out.sum()
    return out.gather(1, out.argmax(dim=1, keepdim=True)).sum()


def saliency_map(image: torch.Tensor, cls_forward) -> torch.Tensor:
    """Input-gradient saliency of the predicted-class logit, detached from any graph.

    ``cls_forward`` maps ``[B, 3, H, W]`` to logits ``[B, K]`` (argmax class is used)
    or to one score per image ``[B]``.
    """
    single, (x,) = _batched(image)
    with torch.enable_grad():
        leaf = x.detach().requires_grad_(True)
        out = cls_forward(leaf)
        if isinstance(out, tuple):
            out = out[0]
        if not out.requires_grad:
            raise RuntimeError("classification forward does not depend differentiably on the input")
        (grad,) = torch.autograd.grad(_selected_score(out), leaf)
    sal = normalize_saliency(grad)
    return sal[0] if single else sal


class SaliencyFusion(nn.Module):
    """Concatenate the saliency map as one extra channel, then a 1x1 conv back to ``C`` channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels + 1, channels, 1)
        self.reset_identity()

    def reset_identity(self) -> None:
        c = self.proj.out_channels
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.weight[:, :c, 0, 0] = torch.eye(c)
            self.proj.bias.zero_()

    def forward(self, feats: torch.Tensor, saliency: torch.Tensor) -> torch.Tensor:
        sal = F.interpolate(saliency, size=feats.shape[-2:], mode="bilinear", align_corners=False)
        return self.proj(torch.cat([feats, sal.to(feats.dtype)], dim=1))


def fuse_saliency(saliency: torch.Tensor, decoder_feats: torch.Tensor, fusion: SaliencyFusion) -> torch.Tensor:
    single, (s, f) = _batched(saliency, decoder_feats)
    out = fusion(f, s)
    return out[0] if single else out


# -- heads and the joint model ------------------------------------------------------


class PixelHead(nn.Module):
    def __init__(self, cin: int, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(cin, cin, 1), nn.ReLU(inplace=True), nn.Conv2d(cin, dim, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=1)


class VectorHead(nn.Module):
    def __init__(self, cin: int, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cin, cin), nn.ReLU(inplace=True), nn.Linear(cin, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=1)


@dataclass
class BranchOutputs:
    seg_logits: torch.Tensor  # [B, 2, H, W]
    cls_logits: torch.Tensor  # [B, 2]
    pixel_embeds: torch.Tensor  # [B, 256, H/16, W/16]
    image_embed: torch.Tensor  # [B, 128]
    f_cls_proj: torch.Tensor  # [B, 128]
    f_seg_proj: torch.Tensor  # [B, 128]
    seg_encoder_feats: list[torch.Tensor]
    seg_decoder_feats: list[torch.Tensor]
    saliency: torch.Tensor | None = None

    def __getitem__(self, idx) -> "BranchOutputs":
        """Slice every per-image tensor along the batch axis."""
        return BranchOutputs(
            self.seg_logits[idx],
            self.cls_logits[idx],
            self.pixel_embeds[idx],
            self.image_embed[idx],
            self.f_cls_proj[idx],
            self.f_seg_proj[idx],
            [f[idx] for f in self.seg_encoder_feats],
            [f[idx] for f in self.seg_decoder_feats],
            None if self.saliency is None else self.saliency[idx],
        )


class HermesModel(nn.Module):
    def __init__(
        self,
        seg_width: int = 32,
        cls_width: int = 32,
        cls_blocks: int = 2,
        pixel_dim: int = 256,
        image_dim: int = 128,
        num_classes: int = 2,
    ):
        super().__init__()
        self.seg = SegBranch(seg_width, num_classes)
        self.cls = ClsBranch(cls_width, cls_blocks, num_classes)
        self.ias = InterTaskAttention(self.cls.channels["mid"], self.seg.channels["mid"])
        self.fusion = SaliencyFusion(self.seg.channels["fuse"])
        self.pixel_head = PixelHead(self.seg.channels["mid"], pixel_dim)
        self.image_head = VectorHead(self.cls.channels["pooled"], image_dim)
        self.cons_cls = VectorHead(self.cls.channels["pooled"], image_dim)
        self.cons_seg = VectorHead(self.seg.channels["deep"], image_dim)

    @classmethod
    def from_config(cls, config) -> "HermesModel":
        return cls(
            config.seg_width,
            config.cls_width,
            config.cls_blocks,
            config.pixel_embed_dim,
            config.image_embed_dim,
            config.num_classes,
        )

    def cls_parameters(self) -> list[nn.Parameter]:
        """Classification backbone plus the attention module (momentum-SGD group)."""
        return list(self.cls.parameters()) + list(self.ias.parameters())

    def seg_parameters(self) -> list[nn.Parameter]:
        """Segmentation branch, saliency fusion and all projection heads (Adam group)."""
        mods = (self.seg, self.fusion, self.pixel_head, self.image_head, self.cons_cls, self.cons_seg)
        return [p for m in mods for p in m.parameters()]

    def forward(self, images: torch.Tensor, with_saliency: bool = True, with_attention: bool = True) -> BranchOutputs:
        enc = self.seg.encode(images)
        x_seg = enc[3] if with_attention else None
        attn = self.ias if with_attention else None
        saliency = None
        if with_saliency:
            outer_grad = torch.is_grad_enabled()
            with torch.enable_grad():
                leaf = images.detach().requires_grad_(True)
                cls_logits, pooled = self.cls(leaf, x_seg, attn)
                (grad,) = torch.autograd.grad(_selected_score(cls_logits), leaf, retain_graph=outer_grad)
            if not outer_grad:
                cls_logits, pooled = cls_logits.detach(), pooled.detach()
            saliency = normalize_saliency(grad).detach()
            fuse = lambda feats: self.fusion(feats, saliency)  # noqa: E731
        else:
            cls_logits, pooled = self.cls(images, x_seg, attn)
            fuse = None
        seg_logits, dec = self.seg.decode(enc, fuse)
        return BranchOutputs(
            seg_logits=seg_logits,
            cls_logits=cls_logits,
            pixel_embeds=self.pixel_head(enc[3]),
            image_embed=self.image_head(pooled),
            f_cls_proj=self.cons_cls(pooled),
            f_seg_proj=self.cons_seg(enc[4].mean(dim=(2, 3))),
            seg_encoder_feats=enc,
            seg_decoder_feats=dec,
            saliency=saliency,
        )
