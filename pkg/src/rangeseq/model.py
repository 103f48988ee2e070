"""Encoder / dual-axis Transformer / decoder network for range-image forecasting."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from rangeseq.tensor_core import (ECA, Conv3d, ConvTranspose3d, MultiHeadSelfAttention,
                                  SampleNorm, ShapeError, TransformerLayer, concat, leaky_relu,
                                  sigmoid)

BRANCHES = ("both", "H", "W")
_BRANCH_ALIASES = {"both": "both", "h": "H", "h-only": "H", "w": "W", "w-only": "W"}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelConfig:
    P: int = 5
    F: int = 5
    height: int = 16
    width: int = 64
    channels: tuple = (8, 16, 32)
    n_layers: int = 2
    n_heads: int = 4
    ff_width: int = 64
    branch: str = "both"
    r_max: float = 50.0
    skip_mode: str = "concat"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        try:
            self.branch = _BRANCH_ALIASES[str(self.branch).lower()]
        except KeyError:
            raise ValueError(f"branch must be one of both/H-only/W-only, got {self.branch!r}") from None
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    @property
    def bottleneck(self) -> tuple[int, int, int, int]:
        s = 2 ** self.n_stages
        return (self.channels[-1], self.P, self.height // s, self.width // s)

    def validate(self):
        if self.P < 1 or self.F < 1:
            raise ValueError("P and F must be positive")
        if not self.channels:
            raise ValueError("at least one encoder stage is required")
        if self.skip_mode not in ("concat", "add"):
            raise ValueError(f"skip_mode must be concat or add, got {self.skip_mode!r}")
        s = 2 ** self.n_stages
        if self.height % s or self.width % s:
            raise ValueError(f"{self.height}x{self.width} input cannot be halved {self.n_stages} times")
        c, _, he, we = self.bottleneck
        if c % self.n_heads:
            raise ValueError(f"{self.n_heads} heads do not divide {c} bottleneck channels")
        if self.branch in ("both", "W") and not _is_pow2(he):
            raise ValueError(f"bottleneck height {he} cannot reach 1 by halving")
        if self.branch in ("both", "H") and not _is_pow2(we):
            raise ValueError(f"bottleneck width {we} cannot reach 1 by halving")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k != "seed"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


TOY = ModelConfig()
# ~22.6 M parameters at the full 64 x 2048 resolution
FULL = ModelConfig(height=64, width=2048, channels=(24, 48, 96, 192, 480), n_layers=2,
                   n_heads=8, ff_width=1024, r_max=85.0)


@dataclass
class ModelOutput:
    range_pred: torch.Tensor  # (F, H, W) or (N, F, H, W), meters
    mask_prob: torch.Tensor


class ConvBlock(nn.Module):
    """conv -> sample norm -> leaky relu -> optional ECA."""

    def __init__(self, conv: nn.Module, out_ch: int, eca: bool = True):
        super().__init__()
        self.conv = conv
        self.norm = SampleNorm(out_ch)
        self.eca = ECA(out_ch) if eca else None

    def forward(self, x):
        x = leaky_relu(self.norm(self.conv(x)))
        return self.eca(x) if self.eca is not None else x


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = (1,) + cfg.channels
        self.stages = nn.ModuleList(
            ConvBlock(Conv3d(chans[i], chans[i + 1], 3, stride=(1, 2, 2), padding=1), chans[i + 1])
            for i in range(cfg.n_stages))

    def forward(self, x):
        cfg = self.cfg
        if tuple(x.shape[1:]) != (1, cfg.P, cfg.height, cfg.width):
            raise ShapeError(f"encode: expected (N, 1, {cfg.P}, {cfg.height}, {cfg.width}), "
                             f"got {tuple(x.shape)}")
        skips = []
        for stage in self.stages:
            skips.append(x)
            x = stage(x)
        return x, skips


class TransformerBranch(nn.Module):
    """Collapse one spatial axis, attend over the time-concatenated sentence, mirror back.

    ``axis="W"`` keeps the width (height is compressed to 1); ``axis="H"`` keeps
    the height.
    """

    def __init__(self, channels: int, time: int, height: int, width: int, axis: str,
                 n_layers: int, n_heads: int, ff_width: int):
        super().__init__()
        if axis not in ("H", "W"):
            raise ValueError(f"axis must be H or W, got {axis!r}")
        self.axis = axis
        squeeze = height if axis == "W" else width
        keep = width if axis == "W" else height
        if not _is_pow2(squeeze):
            raise ValueError(f"Transformer_{axis}: extent {squeeze} cannot reach 1 by halving")
        n_down = int(math.log2(squeeze))
        if axis == "W":
            k, s, p, up_k = (1, 3, 1), (1, 2, 1), (0, 1, 0), (1, 2, 1)
        else:
            k, s, p, up_k = (1, 1, 3), (1, 1, 2), (0, 0, 1), (1, 1, 2)
        self.down = nn.ModuleList(
            ConvBlock(Conv3d(channels, channels, k, stride=s, padding=p, circular=(axis == "H")),
                      channels, eca=False) for _ in range(n_down))
        self.up = nn.ModuleList(
            ConvBlock(ConvTranspose3d(channels, channels, up_k, stride=up_k), channels, eca=False)
            for _ in range(n_down))
        self.length = time * keep
        self.pos = nn.Parameter(torch.zeros(1, self.length, channels))
        nn.init.normal_(self.pos, std=0.02)
        self.layers = nn.ModuleList(TransformerLayer(channels, n_heads, ff_width) for _ in range(n_layers))

    def sentence(self, x):
        """(N, C, T, 1, W) -> (N, T*W, C) for axis W (time-major word order)."""
        if self.axis == "W":
            x = x.squeeze(3)
        else:
            x = x.squeeze(4)
        n, c, t, L = x.shape
        return x.permute(0, 2, 3, 1).reshape(n, t * L, c), (t, L)

    def unsentence(self, s, t, L):
        n, _, c = s.shape
        x = s.reshape(n, t, L, c).permute(0, 3, 1, 2)
        return x.unsqueeze(3) if self.axis == "W" else x.unsqueeze(4)

    def attend(self, s):
        s = s + self.pos
        for layer in self.layers:
            s = layer(s)
        return s

    def forward(self, x):
        shape = x.shape
        for block in self.down:
            x = block(x)
        s, (t, L) = self.sentence(x)
        x = self.unsentence(self.attend(s), t, L)
        for block in self.up:
            x = block(x)
        if x.shape != shape:
            raise ShapeError(f"Transformer_{self.axis}: output {tuple(x.shape)} != input {tuple(shape)}")
        return x


class Fuse(nn.Module):
    def __init__(self, channels: int, n_inputs: int):
        super().__init__()
        self.n_inputs = n_inputs
        self.eca = ECA(channels * n_inputs)
        self.proj = Conv3d(channels * n_inputs, channels, 1)

    def forward(self, *branches):
        if len(branches) != self.n_inputs:
            raise ShapeError(f"fuse: expected {self.n_inputs} branch outputs, got {len(branches)}")
        x = branches[0] if len(branches) == 1 else concat(branches, axis=1)
        return self.proj(self.eca(x))


class DecoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, skip_ch, skip_mode):
        super().__init__()
        self.skip_mode = skip_mode
        self.up = ConvBlock(ConvTranspose3d(in_ch, out_ch, (1, 2, 2), stride=(1, 2, 2)), out_ch, eca=False)
        merged = out_ch + skip_ch if skip_mode == "concat" else out_ch
        self.block = ConvBlock(Conv3d(merged, out_ch, 3, padding=1), out_ch)

    def forward(self, x, skip):
        x = self.up(x)
        if x.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"decode: upsampled {tuple(x.shape)} does not match skip {tuple(skip.shape)}")
        x = concat([x, skip], axis=1) if self.skip_mode == "concat" else x + skip
        return self.block(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        skip_chans = (1,) + chans[:-1]
        stages = []
        for j in reversed(range(cfg.n_stages)):
            out_ch = chans[j - 1] if j > 0 else chans[0]
            stages.append(DecoderStage(chans[j], out_ch, skip_chans[j], cfg.skip_mode))
        self.stages = nn.ModuleList(stages)
        self.head = Conv3d(chans[0], 2, 1)
        if cfg.P != cfg.F:
            self.temporal = nn.Linear(cfg.P, cfg.F)
        else:
            self.temporal = None

    def forward(self, x, skips):
        if len(skips) != len(self.stages):
            raise ShapeError(f"decode: {len(skips)} skips for {len(self.stages)} stages")
        for stage, skip in zip(self.stages, reversed(skips)):
            x = stage(x, skip)
        x = self.head(x)  # (N, 2, P, H, W)
        if self.temporal is not None:
            x = self.temporal(x.movedim(2, -1)).movedim(-1, 2)
        return x


class PredictionNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        c, t, he, we = cfg.bottleneck
        self.encoder = Encoder(cfg)
        args = dict(n_layers=cfg.n_layers, n_heads=cfg.n_heads, ff_width=cfg.ff_width)
        self.branch_h = TransformerBranch(c, t, he, we, "H", **args) if cfg.branch in ("both", "H") else None
        self.branch_w = TransformerBranch(c, t, he, we, "W", **args) if cfg.branch in ("both", "W") else None
        self.fuse = Fuse(c, 2 if cfg.branch == "both" else 1)
        self.decoder = Decoder(cfg)

    def encode(self, x):
        return self.encoder(x)

    def transform(self, feats):
        outs = [b(feats) for b in (self.branch_h, self.branch_w) if b is not None]
        return self.fuse(*outs)

    def forward(self, x) -> ModelOutput:
        """``x``: (N, 1, P, H, W) ranges divided by ``r_max``."""
        feats, skips = self.encode(x)
        raw = self.decoder(self.transform(feats), skips)
        return ModelOutput(range_pred=sigmoid(raw[:, 0]) * self.cfg.r_max, mask_prob=sigmoid(raw[:, 1]))

    def predict(self, past) -> ModelOutput:
        """Forecast from ``past`` ranges in meters, shape (P, H, W)."""
        x = torch.as_tensor(np.asarray(past), dtype=self.dtype)
        x = (x / self.cfg.r_max).clamp(0, 1)[None, None]
        out = self(x)
        return ModelOutput(out.range_pred[0], out.mask_prob[0])

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def branch_parameters(self, axis: str):
        branch = self.branch_h if axis == "H" else self.branch_w
        return list(branch.parameters()) if branch is not None else []


def normalize_ranges(ranges, r_max: float, dtype=torch.float32) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(ranges), dtype=dtype)
    return (x / r_max).clamp(0, 1)


# --------------------------------------------------------------------------
# complexity accounting


@dataclass
class Complexity:
    params: int
    macs: int
    per_layer: list = field(default_factory=list)


def count_params_flops(cfg: ModelConfig) -> Complexity:
    """Parameter count and forward multiply-accumulates, derived from layer shapes.

    The network is instantiated on the meta device so no memory is allocated.
    Normalisation, activations and elementwise products are not counted.
    """
    with torch.device("meta"):
        model = PredictionNet(replace(cfg))
    records = []

    def conv_hook(name):
        def hook(mod, inp, out):
            k = math.prod(mod.kernel_size)
            if isinstance(mod, nn.ConvTranspose3d):
                spatial = math.prod(inp[0].shape[2:])
            else:
                spatial = math.prod(out.shape[2:])
            macs = mod.in_channels // mod.groups * mod.out_channels * k * spatial * out.shape[0]
            records.append((name, macs))
        return hook

    def linear_hook(name):
        def hook(mod, inp, out):
            positions = math.prod(inp[0].shape[:-1])
            records.append((name, positions * mod.in_features * mod.out_features))
        return hook

    def attn_hook(name):
        def hook(mod, inp, out):
            n, L, d = inp[0].shape
            for proj in ("q", "k", "v", "out"):
                records.append((f"{name}.{proj}", n * L * d * d))
            records.append((name + ".scores+mix", 2 * n * L * L * d))
        return hook

    def ff_hook(name):
        # the feed-forward sublayer calls the functional kernel, so no Linear hook fires
        def hook(mod, inp, out):
            positions = math.prod(inp[0].shape[:-1])
            for lin in ("ff1", "ff2"):
                m = getattr(mod, lin)
                records.append((f"{name}.{lin}", positions * m.in_features * m.out_features))
        return hook

    handles = []
    for name, mod in model.named_modules():
        if isinstance(mod, (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d)):
            handles.append(mod.register_forward_hook(conv_hook(name)))
        elif isinstance(mod, MultiHeadSelfAttention):
            handles.append(mod.register_forward_hook(attn_hook(name)))
        elif isinstance(mod, TransformerLayer):
            handles.append(mod.register_forward_hook(ff_hook(name)))
        elif isinstance(mod, nn.Linear):  # only fires for modules invoked through forward()
            handles.append(mod.register_forward_hook(linear_hook(name)))
    with torch.no_grad():
        model(torch.zeros(1, 1, cfg.P, cfg.height, cfg.width, device="meta"))
    for h in handles:
        h.remove()
    params = sum(p.numel() for p in model.parameters())
    return Complexity(params=params, macs=sum(m for _, m in records), per_layer=records)
