"""Frozen proxy segmenter used for the semantic auxiliary loss."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from rangeseq.dataio import CLASS_NAMES, NO_RETURN
from rangeseq.objectives import loss_semantic
from rangeseq.rangeimg import SensorModel, pixel_directions
from rangeseq.tensor_core import Conv2d, leaky_relu, make_adam, note_branch, softmax

log = logging.getLogger(__name__)


class SegmenterTrainingError(RuntimeError):
    pass


@dataclass
class SegmenterConfig:
    n_classes: int = 4
    widths: tuple = (16, 32, 32)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.n_classes < 2:
            raise ValueError("a segmenter needs at least two classes")


class Segmenter(nn.Module):
    """Small circular-width conv stack with a per-pixel softmax.

    The range channel is augmented with the pixel's Cartesian coordinates
    (all scaled by ``max_range``), computed differentiably from the range.
    """

    def __init__(self, cfg: SegmenterConfig, sensor: SensorModel):
        super().__init__()
        self.cfg = cfg
        self.sensor_shape = sensor.shape
        torch.manual_seed(cfg.seed)
        dirs = torch.as_tensor(pixel_directions(sensor), dtype=torch.float32).permute(2, 0, 1)
        self.register_buffer("directions", dirs, persistent=False)
        chans = (4,) + cfg.widths
        self.convs = nn.ModuleList(Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(len(cfg.widths)))
        self.classifier = Conv2d(chans[-1], cfg.n_classes, 1)

    def logits(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if tuple(x.shape[-2:]) != self.sensor_shape:
            raise ValueError(f"segment: expected images of {self.sensor_shape}, got {tuple(x.shape)}")
        h = torch.cat([x, x * self.directions.to(x.dtype)], dim=1)
        for conv in self.convs:
            h = leaky_relu(conv(h))
        return self.classifier(h)

    def forward(self, x):
        """``x``: (N, 1, H, W) or (N, H, W) normalized ranges -> (N, C, H, W) probabilities."""
        return softmax(self.logits(x), axis=1)

    def segment(self, range_image):
        """Single (1, H, W) or (H, W) normalized image -> (C, H, W) semantic map."""
        x = torch.as_tensor(range_image, dtype=self.classifier.weight.dtype)
        x = x.reshape(1, 1, *x.shape[-2:])
        return self(x)[0]

    def freeze(self) -> "Segmenter":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def pixel_accuracy(seg: Segmenter, images: torch.Tensor, labels: torch.Tensor, batch: int = 64) -> float:
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), batch):
            pred = seg.logits(images[i:i + batch]).argmax(1)
            correct += int((pred == labels[i:i + batch]).sum())
    return correct / labels.numel()


def pretrain_segmenter(train_images, train_labels, val_images, val_labels, sensor: SensorModel,
                       cfg: Optional[SegmenterConfig] = None, epochs: int = 30, lr: float = 3e-3,
                       batch: int = 16, min_accuracy: float = 0.8):
    """Supervised pre-training on labeled frames, then freeze.

    Images are normalized ranges ``(N, H, W)``; labels are class ids with
    ``NO_RETURN`` on empty pixels.  Returns ``(segmenter, val_accuracy)``.
    """
    cfg = cfg or SegmenterConfig()
    seg = Segmenter(cfg, sensor)
    x_tr = torch.as_tensor(np.asarray(train_images), dtype=torch.float32)
    y_tr = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    x_va = torch.as_tensor(np.asarray(val_images), dtype=torch.float32)
    y_va = torch.as_tensor(np.asarray(val_labels), dtype=torch.long)
    if y_tr.max() >= cfg.n_classes:
        raise ValueError(f"labels reach {int(y_tr.max())} but segmenter has {cfg.n_classes} classes")
    opt = make_adam(seg.parameters(), lr)
    rng = np.random.default_rng(cfg.seed)
    ce = nn.CrossEntropyLoss()
    for epoch in range(epochs):
        order = rng.permutation(len(x_tr))
        total = 0.0
        for i in range(0, len(order), batch):
            idx = torch.as_tensor(order[i:i + batch])
            loss = ce(seg.logits(x_tr[idx]), y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.debug("segmenter epoch %d loss %.4f", epoch, total / len(order))
    acc = pixel_accuracy(seg, x_va, y_va)
    log.info("segmenter held-out pixel accuracy %.4f", acc)
    if acc < min_accuracy:
        per_class = {}
        with torch.no_grad():
            pred = seg.logits(x_va).argmax(1)
        for c in range(cfg.n_classes):
            sel = y_va == c
            if sel.any():
                per_class[c] = float((pred[sel] == c).float().mean())
        raise SegmenterTrainingError(
            f"segmenter reached only {acc:.3f} held-out accuracy (< {min_accuracy}); "
            f"per-class accuracy {per_class}, class counts {torch.bincount(y_va.flatten()).tolist()}")
    return seg.freeze(), acc


def aux_semantic_loss(pred_ranges, gt_ranges, segmenter: Segmenter, rng: np.random.Generator,
                      r_max: float, mask_prob=None, gate: bool = False, threshold: float = 0.5):
    """L1 between segmenter outputs on one randomly chosen predicted frame and its target.

    ``pred_ranges``/``gt_ranges`` are (F, H, W) in meters.  The target side is
    the segmenter's own output on the ground-truth frame.  Returns
    ``(loss, frame_index)``.
    """
    F = pred_ranges.shape[0]
    k = int(rng.integers(F))
    pred = pred_ranges[k] / r_max
    if gate:
        keep = mask_prob[k] > threshold
        note_branch(keep)
        pred = pred * keep.to(pred.dtype)
    gt = torch.as_tensor(np.asarray(gt_ranges[k]), dtype=pred.dtype) / r_max
    with torch.no_grad():
        target = segmenter.segment(gt)
    return loss_semantic(segmenter.segment(pred), target, gt > 0), k


def segmenter_metadata(seg: Segmenter) -> dict:
    return {"kind": "segmenter", "config": asdict(seg.cfg), "classes": list(CLASS_NAMES[:seg.cfg.n_classes]),
            "no_return": NO_RETURN, "sensor_shape": list(seg.sensor_shape)}
