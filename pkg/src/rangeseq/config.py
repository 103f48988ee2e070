"""Run configuration: TOML file + environment overrides, validated up front."""

from __future__ import annotations

import copy
import os
import sys
from pathlib import Path
from typing import Any, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from rangeseq.dataio import SyntheticSceneConfig
from rangeseq.model import FULL, TOY, ModelConfig
from rangeseq.rangeimg import SensorModel
from rangeseq.semseg import SegmenterConfig
from rangeseq.trainer import TrainConfig

ENV_PREFIX = "RANGESEQ_"


class ConfigError(ValueError):
    pass


def _model_section(m: ModelConfig) -> dict:
    return {"channels": list(m.channels), "heads": m.n_heads, "layers": m.n_layers,
            "branch": m.branch, "ff_width": m.ff_width, "P": m.P, "F": m.F,
            "skip_mode": m.skip_mode, "seed": m.seed}


_TRAIN = TrainConfig()
_SYNTH = SyntheticSceneConfig()

PRESETS = {
    "full": {
        "sensor": {"h": 64, "w": 2048, "fov_up_deg": 3.0, "fov_down_deg": 25.0, "r_max": FULL.r_max},
        "model": _model_section(FULL),
    },
    "toy": {
        "sensor": {"h": 16, "w": 64, "fov_up_deg": 15.0, "fov_down_deg": 15.0, "r_max": TOY.r_max},
        "model": _model_section(TOY),
    },
}

COMMON = {
    "preset": "full",
    "output_dir": "runs/default",
    "train": {"lr": _TRAIN.lr, "decay": _TRAIN.decay, "epochs": 50, "alpha_s": 0.0,
              "phase_split": 40, "seed": 0, "threshold": _TRAIN.threshold,
              "checkpoint_every": 0, "chamfer_points": _TRAIN.chamfer_points,
              "grad_accum": 1, "gate_semantic": False, "log_chamfer_in_pretrain": False,
              "steps_per_epoch": 0, "progress_every": 50},
    "data": {"dataset": "", "manifest": [], "val_manifest": [], "test_manifest": [], "stride": 1,
             "synthetic": {"seed": 0, "n_sequences": 30, "n_frames": 12, "n_boxes": _SYNTH.n_boxes,
                           "v_min": _SYNTH.v_min, "v_max": _SYNTH.v_max, "extent": _SYNTH.extent,
                           "sensor_height": _SYNTH.sensor_height, "wall_height": _SYNTH.wall_height,
                           "walls": _SYNTH.walls, "val_fraction": 0.2, "test_fraction": 0.2}},
    "seg": {"classes": 4, "widths": [16, 32, 32], "epochs": 20, "lr": 3e-3, "seed": 0,
            "checkpoint": ""},
}


def defaults(preset: str = "full") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    cfg = copy.deepcopy(COMMON)
    cfg["preset"] = preset
    cfg.update(copy.deepcopy(PRESETS[preset]))
    return cfg


def _merge(base: dict, override: Mapping, path: str = "") -> None:
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be a table")
            _merge(base[key], value, where + ".")
        else:
            base[key] = _coerce(base[key], value, where)


def _coerce(default, value, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {where!r} must be true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, list) and isinstance(value, str):
        return [value] if value else []
    if type(default) is not type(value) and not (isinstance(default, list) and isinstance(value, list)):
        raise ConfigError(f"config key {where!r} expects {type(default).__name__}, got {value!r}")
    return value


def _parse_env_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str]) -> dict:
    """``RANGESEQ_TRAIN__LR=0.01`` -> ``{"train": {"lr": 0.01}}``."""
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        # keep the case of short keys such as P and F
        key = parts[-1]
        node[{"p": "P", "f": "F"}.get(key, key)] = _parse_env_value(raw)
    return out


def load_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
                overrides: Optional[Mapping] = None) -> dict:
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    env = env_overrides(os.environ if environ is None else environ)
    preset = env.get("preset", raw.get("preset", "full"))
    cfg = defaults(preset)
    _merge(cfg, raw)
    _merge(cfg, env)
    if overrides:
        _merge(cfg, overrides)
    build_all(cfg)  # validates every section eagerly
    return cfg


def dump_config(cfg: dict) -> str:
    return tomli_w.dumps(cfg)


def write_snapshot(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.toml"
    path.write_text(dump_config(cfg))
    return path


# --------------------------------------------------------------------------
# typed views


def sensor_from(cfg: dict) -> SensorModel:
    s = cfg["sensor"]
    try:
        return SensorModel.from_degrees(s["h"], s["w"], s["fov_up_deg"], s["fov_down_deg"], s["r_max"])
    except ValueError as exc:
        raise ConfigError(f"sensor: {exc}") from None


def model_from(cfg: dict) -> ModelConfig:
    m, s = cfg["model"], cfg["sensor"]
    try:
        return ModelConfig(P=m["P"], F=m["F"], height=s["h"], width=s["w"], channels=tuple(m["channels"]),
                           n_layers=m["layers"], n_heads=m["heads"], ff_width=m["ff_width"],
                           branch=m["branch"], r_max=s["r_max"], skip_mode=m["skip_mode"], seed=m["seed"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def train_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(lr=t["lr"], decay=t["decay"], epochs=t["epochs"], phase_split=t["phase_split"],
                           alpha_s=t["alpha_s"], threshold=t["threshold"], seed=t["seed"],
                           checkpoint_every=t["checkpoint_every"], chamfer_points=t["chamfer_points"],
                           log_chamfer_in_pretrain=t["log_chamfer_in_pretrain"], grad_accum=t["grad_accum"],
                           gate_semantic=t["gate_semantic"], steps_per_epoch=t["steps_per_epoch"] or None)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def segmenter_from(cfg: dict) -> SegmenterConfig:
    s = cfg["seg"]
    try:
        return SegmenterConfig(n_classes=s["classes"], widths=tuple(s["widths"]), seed=s["seed"])
    except ValueError as exc:
        raise ConfigError(f"seg: {exc}") from None


def scene_from(cfg: dict, seed: int) -> SyntheticSceneConfig:
    d = cfg["data"]["synthetic"]
    try:
        return SyntheticSceneConfig(seed=seed, n_frames=d["n_frames"], n_boxes=d["n_boxes"],
                                    v_min=d["v_min"], v_max=d["v_max"], extent=d["extent"],
                                    sensor_height=d["sensor_height"], wall_height=d["wall_height"],
                                    walls=d["walls"])
    except ValueError as exc:
        raise ConfigError(f"data.synthetic: {exc}") from None


def build_all(cfg: dict) -> None:
    sensor_from(cfg)
    model_from(cfg)
    train_from(cfg)
    segmenter_from(cfg)
    scene_from(cfg, 0)
    d = cfg["data"]
    for key in ("val_fraction", "test_fraction"):
        if not 0 <= d["synthetic"][key] < 1:
            raise ConfigError(f"data.synthetic.{key} must lie in [0, 1)")
    if d["stride"] < 1:
        raise ConfigError("data.stride must be >= 1")
