"""Two-phase training, checkpoints and the per-step chamfer evaluation harness."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from rangeseq.dataio import SequenceSample, load_tensor_file, read_text_entry, save_tensor_file, text_entry
from rangeseq.model import ModelConfig, ModelOutput, PredictionNet, normalize_ranges
from rangeseq.objectives import (EmptyCloudError, LossReport, LossWeights, baseline_copy_last,
                                 loss_chamfer, loss_mask, loss_range, one_hot, semantic_similarity,
                                 total_loss)
from rangeseq.rangeimg import SensorModel, pixel_directions
from rangeseq.semseg import Segmenter, SegmenterConfig, aux_semantic_loss, segmenter_metadata
from rangeseq.tensor_core import make_adam, note_branch, set_lr

log = logging.getLogger(__name__)

META_KEY = "__meta__"
EMPTY_CLOUD_PENALTY = 100.0


class NumericError(RuntimeError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.99
    epochs: int = 1
    phase_split: Optional[int] = None  # epochs with alpha_c = 0; None means all of them
    alpha_s: float = 0.0
    threshold: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0  # epochs, 0 disables cadence checkpoints
    chamfer_points: int = 4096
    log_chamfer_in_pretrain: bool = False
    grad_accum: int = 1
    gate_semantic: bool = False
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")

    @property
    def pretrain_epochs(self) -> int:
        return self.epochs if self.phase_split is None else min(self.phase_split, self.epochs)

    def alpha_c(self, epoch: int) -> float:
        return 0.0 if epoch < self.pretrain_epochs else 1.0

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** epoch


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)

    def records(self):
        for s in self.steps:
            yield {"kind": "step", **s}
        for e in self.epochs:
            yield {"kind": "epoch", **e}

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: PredictionNet, **meta) -> None:
    entries = [(k, v.detach().cpu().numpy()) for k, v in model.state_dict().items()]
    info = {"kind": "predictor", "config": model.cfg.to_dict(),
            "config_hash": model.cfg.config_hash(), **meta}
    entries.append((META_KEY, text_entry(info)))
    save_tensor_file(path, entries)


def load_checkpoint(path, model_cfg: Optional[ModelConfig] = None):
    """Rebuild a predictor; ``model_cfg`` (if given) must match the stored hash."""
    tensors = load_tensor_file(path)
    meta = read_text_entry(tensors.pop(META_KEY))
    stored = ModelConfig(**meta["config"])
    if model_cfg is not None and model_cfg.config_hash() != meta["config_hash"]:
        raise ConfigMismatchError(f"{path}: checkpoint config hash {meta['config_hash']} does not match "
                                  f"requested model config {model_cfg.config_hash()}")
    model = PredictionNet(stored)
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model, meta


def save_segmenter(path, seg: Segmenter, sensor: SensorModel, **meta) -> None:
    entries = [(k, v.detach().cpu().numpy()) for k, v in seg.state_dict().items()]
    info = {**segmenter_metadata(seg), "sensor": asdict(sensor), **meta}
    entries.append((META_KEY, text_entry(info)))
    save_tensor_file(path, entries)


def load_segmenter(path):
    tensors = load_tensor_file(path)
    meta = read_text_entry(tensors.pop(META_KEY))
    sensor = SensorModel(**meta["sensor"])
    seg = Segmenter(SegmenterConfig(**meta["config"]), sensor)
    seg.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    return seg.freeze(), meta


# --------------------------------------------------------------------------
# losses for one sample


class CloudHelper:
    """Caches pixel ray directions to re-project range images differentiably."""

    def __init__(self, sensor: SensorModel, dtype=torch.float32):
        self.dirs = torch.as_tensor(pixel_directions(sensor), dtype=dtype)

    def cloud(self, ranges, keep):
        """``ranges`` (H, W) tensor, ``keep`` (H, W) bool -> (N, 3) points."""
        return ranges[keep].unsqueeze(-1) * self.dirs.to(ranges.dtype)[keep]


def frame_chamfer(helper: CloudHelper, pred_range, pred_mask, gt_range, threshold,
                  max_points=None, rng=None):
    keep = (pred_mask > threshold) & (pred_range > 0)
    note_branch(keep)
    pred = helper.cloud(pred_range, keep)
    gt = helper.cloud(gt_range, gt_range > 0)
    if max_points is not None and rng is not None:
        if len(pred) > max_points:
            pred = pred[torch.as_tensor(np.sort(rng.choice(len(pred), max_points, replace=False)))]
        if len(gt) > max_points:
            gt = gt[torch.as_tensor(np.sort(rng.choice(len(gt), max_points, replace=False)))]
    return loss_chamfer(pred, gt)


def sample_losses(model: PredictionNet, sample: SequenceSample, weights: LossWeights,
                  segmenter: Optional[Segmenter] = None, aux_rng=None, chamfer_rng=None,
                  compute_chamfer: bool = False, threshold: float = 0.5,
                  chamfer_points: Optional[int] = 4096, gate_semantic: bool = False,
                  helper: Optional[CloudHelper] = None):
    """Forward one sample and assemble the weighted loss.

    Returns ``(total, report, output)``.
    """
    cfg = model.cfg
    dtype = model.dtype
    out = model.predict(sample.past)
    gt = torch.as_tensor(sample.future, dtype=dtype)
    l_r = loss_range(out.range_pred, gt)
    l_m = loss_mask(out.mask_prob, (gt > 0).to(dtype))
    zero = torch.zeros((), dtype=dtype)
    l_s = zero
    if weights.alpha_s > 0:
        if segmenter is None:
            raise ValueError("alpha_s > 0 requires a pre-trained segmenter")
        l_s, _ = aux_semantic_loss(out.range_pred, gt, segmenter, aux_rng, cfg.r_max,
                                   out.mask_prob, gate_semantic, threshold)
    l_c = zero
    per_step = []
    if compute_chamfer or weights.alpha_c > 0:
        helper = helper or CloudHelper(sample.sensor, dtype)
        parts = []
        for k in range(cfg.F):
            try:
                parts.append(frame_chamfer(helper, out.range_pred[k], out.mask_prob[k], gt[k],
                                           threshold, chamfer_points, chamfer_rng))
            except EmptyCloudError:
                log.warning("empty cloud at step %d (sample start %d); using penalty %.1f",
                            k + 1, sample.start, EMPTY_CLOUD_PENALTY)
                parts.append(torch.tensor(EMPTY_CLOUD_PENALTY, dtype=dtype))
        per_step = [p.item() for p in parts]
        l_c = torch.stack(parts).mean()
    # with alpha_c == 0 a logged chamfer value contributes exactly zero
    total = total_loss(l_r, l_m, l_s, l_c, weights)
    report = LossReport(l_r.item(), l_m.item(), l_s.item(), l_c.item(), total.item(),
                        weights.alpha_s, weights.alpha_c, per_step)
    return total, report, out


def _check_finite(total, out: ModelOutput, index: int):
    if not torch.isfinite(total):
        stats = {name: (t.min().item(), t.max().item(), t.mean().item())
                 for name, t in (("range", out.range_pred), ("mask", out.mask_prob))}
        raise NumericError(f"non-finite loss at sample {index}; head (min, max, mean): {stats}")


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PredictionNet
    log: TrainLog
    best_path: Optional[Path] = None


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_samples: Sequence[SequenceSample],
          val_samples: Sequence[SequenceSample] = (), segmenter: Optional[Segmenter] = None,
          out_dir=None, progress_every: int = 0, model: Optional[PredictionNet] = None) -> TrainResult:
    if not train_samples:
        raise ValueError("no training samples")
    if train_cfg.alpha_s > 0 and segmenter is None:
        raise ValueError("alpha_s > 0 requires a pre-trained segmenter")
    if segmenter is not None and not segmenter.frozen:
        raise ValueError("the segmenter must be frozen before predictor training")
    model = model if model is not None else PredictionNet(model_cfg)
    model.train()
    params = list(model.parameters())
    opt = make_adam(params, train_cfg.lr)
    order_rng = np.random.default_rng(train_cfg.seed)
    aux_rng = np.random.default_rng(train_cfg.seed + 1)
    chamfer_rng = np.random.default_rng(train_cfg.seed + 2)
    helper = CloudHelper(train_samples[0].sensor, model.dtype)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    best, best_path = math.inf, None
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        set_lr(opt, lr)
        tlog.lr_trace.append(lr)
        weights = LossWeights(train_cfg.alpha_s, train_cfg.alpha_c(epoch))
        phase = "pretrain" if weights.alpha_c == 0 else "finetune"
        order = order_rng.permutation(len(train_samples))
        if train_cfg.steps_per_epoch is not None:
            order = order[:train_cfg.steps_per_epoch]
        opt.zero_grad()
        for j, idx in enumerate(order):
            sample = train_samples[idx]
            total, report, out = sample_losses(
                model, sample, weights, segmenter, aux_rng, chamfer_rng,
                compute_chamfer=train_cfg.log_chamfer_in_pretrain, threshold=train_cfg.threshold,
                chamfer_points=train_cfg.chamfer_points, gate_semantic=train_cfg.gate_semantic,
                helper=helper)
            _check_finite(total, out, int(idx))
            (total / train_cfg.grad_accum).backward()
            if (j + 1) % train_cfg.grad_accum == 0 or j + 1 == len(order):
                opt.step()
                opt.zero_grad()
            tlog.steps.append({"step": step, "epoch": epoch, "phase": phase, "sample": int(idx),
                               "lr": lr, **{k: getattr(report, k) for k in ("l_r", "l_m", "l_s", "l_c", "total")}})
            if progress_every and step % progress_every == 0:
                print(f"step {step:6d} epoch {epoch:3d} {phase:8s} total {report.total:.4f} "
                      f"l_r {report.l_r:.4f} l_m {report.l_m:.4f} l_s {report.l_s:.4f} l_c {report.l_c:.4f}",
                      flush=True)
            step += 1
        epoch_rec = {"epoch": epoch, "phase": phase, "lr": lr, "steps": step}
        if val_samples:
            metrics = validate(model, val_samples, with_chamfer=(phase == "finetune"),
                               threshold=train_cfg.threshold)
            epoch_rec.update({f"val_{k}": v for k, v in metrics.items()})
            score = metrics["chamfer"] if phase == "finetune" else metrics["l_r"] + metrics["l_m"]
            if out_dir is not None and score < best:
                best = score
                best_path = out_dir / "checkpoints" / "best.rctf"
                save_checkpoint(best_path, model, step=step, epoch=epoch, score=score)
        tlog.epochs.append(epoch_rec)
        if out_dir is not None and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:04d}.rctf", model, step=step, epoch=epoch)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoints" / "last.rctf", model, step=step, epoch=train_cfg.epochs - 1)
        tlog.write_jsonl(out_dir / "trainlog.jsonl")
    return TrainResult(model, tlog, best_path)


def validate(model: PredictionNet, samples: Sequence[SequenceSample], with_chamfer: bool = False,
             threshold: float = 0.5) -> dict:
    """Mean l_r, l_m (and full-cloud chamfer) in evaluation mode."""
    was_training = model.training
    model.eval()
    sums = {"l_r": 0.0, "l_m": 0.0, "chamfer": 0.0}
    with torch.no_grad():
        for s in samples:
            _, rep, _ = sample_losses(model, s, LossWeights(), compute_chamfer=with_chamfer,
                                      threshold=threshold, chamfer_points=None)
            sums["l_r"] += rep.l_r
            sums["l_m"] += rep.l_m
            sums["chamfer"] += rep.l_c
    model.train(was_training)
    out = {k: v / len(samples) for k, v in sums.items()}
    if not with_chamfer:
        out.pop("chamfer")
    return out


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    chamfer: list  # per prediction step
    baseline_chamfer: list
    l_r: float
    l_m: float
    n_samples: int
    similarity: Optional[float] = None
    baseline_similarity: Optional[float] = None
    gt_similarity: Optional[float] = None
    empty_predictions: int = 0

    @property
    def mean_chamfer(self) -> float:
        return float(np.mean(self.chamfer))

    @property
    def baseline_mean(self) -> float:
        return float(np.mean(self.baseline_chamfer))

    def table(self) -> str:
        lines = [f"{'Prediction Step':>15s} {'Model':>12s} {'Copy-last':>12s}"]
        for i, (a, b) in enumerate(zip(self.chamfer, self.baseline_chamfer), 1):
            lines.append(f"{i:>15d} {a:>12.4f} {b:>12.4f}")
        lines.append(f"{'Mean':>15s} {self.mean_chamfer:>12.4f} {self.baseline_mean:>12.4f}")
        lines.append(f"{'L_R':>15s} {self.l_r:>12.4f}")
        lines.append(f"{'L_M':>15s} {self.l_m:>12.4f}")
        if self.similarity is not None:
            lines.append(f"{'Sem. sim.':>15s} {self.similarity:>12.4f} {self.baseline_similarity:>12.4f}")
            lines.append(f"{'Sem. sim. (GT)':>15s} {self.gt_similarity:>12.4f}")
        lines.append(f"samples: {self.n_samples}")
        return "\n".join(lines)

    def records(self) -> list[dict]:
        recs = [{"step": i, "chamfer": a, "baseline_chamfer": b}
                for i, (a, b) in enumerate(zip(self.chamfer, self.baseline_chamfer), 1)]
        recs.append({"step": "mean", "chamfer": self.mean_chamfer, "baseline_chamfer": self.baseline_mean})
        summary = {"step": "summary", "l_r": self.l_r, "l_m": self.l_m, "n_samples": self.n_samples,
                   "empty_predictions": self.empty_predictions}
        if self.similarity is not None:
            summary.update(similarity=self.similarity, baseline_similarity=self.baseline_similarity,
                           gt_similarity=self.gt_similarity)
        recs.append(summary)
        return recs

    def write(self, out_dir, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.txt").write_text(self.table() + "\n")
        with open(out_dir / f"{stem}.jsonl", "w") as fh:
            for r in self.records():
                fh.write(json.dumps(r) + "\n")


def _similarity(seg: Segmenter, ranges, labels, r_max, valid_only):
    sem = seg(torch.as_tensor(ranges, dtype=torch.float32)[:, None] / r_max)
    y = one_hot(labels, seg.cfg.n_classes)
    values = []
    for k in range(len(sem)):
        valid = torch.as_tensor(labels[k] != seg.cfg.n_classes - 1) if valid_only else None
        values.append(semantic_similarity(sem[k], y[k], valid).value)
    return values


def evaluate_model(model: PredictionNet, samples: Sequence[SequenceSample],
                   segmenter: Optional[Segmenter] = None, threshold: float = 0.5,
                   valid_only_similarity: bool = False) -> EvalReport:
    """Per-step full-cloud chamfer for the model and the copy-last baseline."""
    if not samples:
        raise ValueError("no evaluation samples")
    cfg = model.cfg
    model.eval()
    helper = CloudHelper(samples[0].sensor, torch.float64)
    F = cfg.F
    cd = np.zeros(F)
    cd_base = np.zeros(F)
    l_r = l_m = 0.0
    sims, sims_base, sims_gt = [], [], []
    empty = 0
    with torch.no_grad():
        for s in samples:
            out = model.predict(s.past)
            base = baseline_copy_last(torch.as_tensor(s.past, dtype=torch.float64), F)
            gt = torch.as_tensor(s.future, dtype=torch.float64)
            pr = out.range_pred.double()
            pm = out.mask_prob.double()
            l_r += float(loss_range(pr, gt))
            l_m += float(loss_mask(pm, (gt > 0).double()))
            for k in range(F):
                for dest, (r, m) in ((cd, (pr[k], pm[k])), (cd_base, (base.range_pred[k], base.mask_prob[k]))):
                    try:
                        dest[k] += float(frame_chamfer(helper, r, m, gt[k], threshold))
                    except EmptyCloudError:
                        empty += 1
                        dest[k] += EMPTY_CLOUD_PENALTY
            if segmenter is not None and s.future_labels is not None:
                gated = (pr * (pm > threshold)).numpy()
                sims.extend(_similarity(segmenter, gated, s.future_labels, cfg.r_max, valid_only_similarity))
                sims_base.extend(_similarity(segmenter, base.range_pred.numpy(), s.future_labels, cfg.r_max,
                                             valid_only_similarity))
                sims_gt.extend(_similarity(segmenter, s.future, s.future_labels, cfg.r_max, valid_only_similarity))
    n = len(samples)
    rep = EvalReport(list(cd / n), list(cd_base / n), l_r / n, l_m / n, n, empty_predictions=empty)
    if sims:
        rep.similarity = float(np.mean(sims))
        rep.baseline_similarity = float(np.mean(sims_base))
        rep.gt_similarity = float(np.mean(sims_gt))
    return rep


def evaluate(checkpoint, samples: Sequence[SequenceSample], model_cfg: Optional[ModelConfig] = None,
             segmenter: Optional[Segmenter] = None, threshold: float = 0.5, **kw) -> EvalReport:
    model, _ = load_checkpoint(checkpoint, model_cfg)
    return evaluate_model(model, samples, segmenter, threshold, **kw)


# --------------------------------------------------------------------------
# convergence smoke test


@dataclass
class OverfitDiagnostics:
    loss_trace: list
    l_r_trace: list
    chamfer: list
    baseline_chamfer: list
    model: PredictionNet = field(repr=False)


def overfit_single_sequence(model_cfg: ModelConfig, sample: SequenceSample, steps: int,
                            lr: float = 1e-3, threshold: float = 0.5) -> OverfitDiagnostics:
    """Fit one sample with l_r + l_m and compare per-step chamfer to copy-last."""
    model = PredictionNet(model_cfg)
    model.train()
    opt = make_adam(model.parameters(), lr)
    weights = LossWeights()
    totals, l_rs = [], []
    for _ in range(steps):
        total, rep, _ = sample_losses(model, sample, weights)
        totals.append(rep.total)
        l_rs.append(rep.l_r)
        opt.zero_grad()
        total.backward()
        opt.step()
    with torch.no_grad():
        _, rep, _ = sample_losses(model, sample, weights)
    totals.append(rep.total)
    l_rs.append(rep.l_r)
    report = evaluate_model(model, [sample], threshold=threshold)
    model.train()
    return OverfitDiagnostics(totals, l_rs, report.chamfer, report.baseline_chamfer, model)
