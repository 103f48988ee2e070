"""Training losses and evaluation metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from rangeseq.model import ModelOutput
from rangeseq.tensor_core import ShapeError, abs_, clamp, note_branch

BCE_EPS = 1e-7
SIMILARITY_EPS = 1e-7


class EmptyCloudError(ValueError):
    """Chamfer distance is undefined for an empty cloud."""


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def loss_range(pred, gt):
    """Mean absolute range error over pixels with a ground-truth return."""
    pred, gt = _t(pred), _t(gt, pred)
    if pred.shape != gt.shape:
        raise ShapeError(f"loss_range: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        warnings.warn("loss_range: no valid ground-truth pixels", RuntimeWarning)
        return pred.sum() * 0.0
    return abs_(pred - gt)[valid].sum() / n


def loss_mask(pred_prob, gt_mask, eps: float = BCE_EPS):
    pred_prob, gt_mask = _t(pred_prob), _t(gt_mask, pred_prob)
    if pred_prob.shape != gt_mask.shape:
        raise ShapeError(f"loss_mask: pred {tuple(pred_prob.shape)} vs gt {tuple(gt_mask.shape)}")
    p = clamp(pred_prob, eps, 1 - eps)
    m = gt_mask.to(p.dtype)
    return -(m * torch.log(p) + (1 - m) * torch.log(1 - p)).mean()


def loss_semantic(pred_sem, gt_sem, valid):
    """L1 between class-probability maps ``(C, H, W)``, averaged over valid pixels."""
    pred_sem, gt_sem = _t(pred_sem), _t(gt_sem, pred_sem)
    valid = _t(valid).bool()
    if pred_sem.shape != gt_sem.shape or pred_sem.shape[1:] != valid.shape:
        raise ShapeError(f"loss_semantic: pred {tuple(pred_sem.shape)}, gt {tuple(gt_sem.shape)}, "
                         f"valid {tuple(valid.shape)}")
    n = int(valid.sum())
    if n == 0:
        warnings.warn("loss_semantic: no valid pixels", RuntimeWarning)
        return pred_sem.sum() * 0.0
    diff = abs_(pred_sem - gt_sem)[:, valid]
    return diff.sum() / (pred_sem.shape[0] * n)


def chamfer_brute_force(a, b) -> float:
    """O(N*M) reference chamfer distance on numpy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloudError("chamfer distance needs two non-empty clouds")
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def nearest_indices(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(ref).query(query, k=1)
    return idx


def loss_chamfer(pred, gt):
    """Chamfer distance with k-d tree correspondence search.

    Accepts numpy arrays or tensors; gradients flow through tensor inputs.
    """
    pred_t, gt_t = _t(pred), None
    gt_t = _t(gt, pred_t)
    pred_t = pred_t.reshape(-1, 3)
    gt_t = gt_t.reshape(-1, 3)
    if len(pred_t) == 0 or len(gt_t) == 0:
        raise EmptyCloudError("chamfer distance needs two non-empty clouds")
    a = pred_t.detach().cpu().double().numpy()
    b = gt_t.detach().cpu().double().numpy()
    ia = torch.as_tensor(nearest_indices(a, b))
    ib = torch.as_tensor(nearest_indices(b, a))
    note_branch(ia)
    note_branch(ib)
    fwd = ((pred_t - gt_t[ia]) ** 2).sum(-1).mean()
    bwd = ((gt_t - pred_t[ib]) ** 2).sum(-1).mean()
    return fwd + bwd


@dataclass
class LossWeights:
    alpha_s: float = 0.0
    alpha_c: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha_s) and math.isfinite(self.alpha_c)):
            raise ValueError("loss weights must be finite")
        if self.alpha_s < 0 or self.alpha_c < 0:
            raise ValueError("loss weights must be non-negative")


def total_loss(l_r, l_m, l_s, l_c, weights: LossWeights):
    return l_r + l_m + weights.alpha_s * l_s + weights.alpha_c * l_c


@dataclass
class LossReport:
    l_r: float
    l_m: float
    l_s: float
    l_c: float
    total: float
    alpha_s: float = 0.0
    alpha_c: float = 0.0
    chamfer_per_step: list = field(default_factory=list)

    def recomputed_total(self) -> float:
        """Rebuild ``total`` from the parts in float32 with the training accumulation order."""
        t = lambda v: torch.tensor(v, dtype=torch.float32)
        w = LossWeights(self.alpha_s, self.alpha_c)
        return float(total_loss(t(self.l_r), t(self.l_m), t(self.l_s), t(self.l_c), w))


class Similarity(NamedTuple):
    value: float
    capped: bool


def semantic_similarity(pred_sem, labels, valid=None, eps: float = SIMILARITY_EPS) -> Similarity:
    """Pixel count times class count over the total cross-entropy to one-hot labels.

    Evaluation only.  ``valid`` restricts the sum (and the numerator) to a
    pixel subset.  The denominator is floored at the value reached when every
    true-class probability is ``1 - eps``; hitting the floor sets ``capped``.
    """
    with torch.no_grad():
        p = _t(pred_sem).double().clamp(eps, 1.0)
        y = _t(labels).double()
        if p.shape != y.shape:
            raise ShapeError(f"semantic_similarity: pred {tuple(p.shape)} vs labels {tuple(y.shape)}")
        c = p.shape[0]
        ce = -(y * torch.log(p))
        if valid is not None:
            valid = _t(valid).bool()
            n_pix = int(valid.sum())
            denom = float(ce[:, valid].sum())
        else:
            n_pix = math.prod(p.shape[1:])
            denom = float(ce.sum())
    floor = n_pix * -math.log1p(-eps)
    capped = denom <= floor
    return Similarity(c * n_pix / max(denom, floor), capped)


def one_hot(labels, n_classes: int) -> torch.Tensor:
    """(..., H, W) integer ids -> (..., C, H, W) float one-hot."""
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    out = torch.nn.functional.one_hot(lab, n_classes).to(torch.float64)
    return out.movedim(-1, -3)


def baseline_copy_last(past, F: Optional[int] = None) -> ModelOutput:
    """Repeat the last observed frame for every future step (``F`` defaults to ``P``)."""
    past = _t(past)
    if past.dim() != 3 or past.shape[0] < 1:
        raise ShapeError(f"copy-last baseline needs (P, H, W) input, got {tuple(past.shape)}")
    F = past.shape[0] if F is None else F
    last = past[-1]
    ranges = last.expand(F, *last.shape).clone()
    return ModelOutput(range_pred=ranges, mask_prob=(ranges > 0).to(ranges.dtype))
