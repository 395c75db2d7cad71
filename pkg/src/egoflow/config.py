"""Configuration: model, loss, scene and training settings.

Config files are INI-style (``[section]`` headers with ``key = value``
lines). Every constant has a named key; unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    channels: tuple = (32, 128, 256, 512)
    neighbors: int = 16
    flow_channels: int = 64
    seg_widths: tuple = (64, 32, 1)
    flow_widths: tuple = (64, 32, 3)
    conf_widths: tuple = (64, 1)
    mask_threshold: float = 0.5
    # ablation switches, all on = full model
    mask_in_ego: bool = True
    hybrid_warp: bool = True
    feature_update: bool = True
    attention_refine: bool = True
    hybrid_features: bool = True
    stop_gradient: bool = True


@dataclass
class LossConfig:
    gamma: float = 20.0
    beta: float = 1.8
    alphas: tuple = (0.02, 0.04, 0.08, 0.16)
    smooth_neighbors: tuple = (16, 12, 8, 4)
    masked_flow_loss: bool = True
    use_seg: bool = True
    use_ego: bool = True
    use_flow: bool = True


@dataclass
class TrainConfig:
    lr: float = 0.001
    lr_decay: float = 0.7
    decay_epochs: int = 10
    epochs: int = 150
    max_steps: int = 0  # 0 = no cap
    n_points: int = 8192
    augment: bool = True
    seed: int = 0
    dataset: str = ""
    val_dataset: str = ""
    out_dir: str = "runs/default"
    checkpoint_every: int = 1


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: dict = field(default_factory=dict)


TABLE3_TOGGLES = ("mask_in_ego", "hybrid_warp", "feature_update",
                  "attention_refine", "hybrid_features", "stop_gradient")


def table3_row(row: int) -> dict:
    """Switch settings of ablation row 1..7: the first ``row - 1`` components enabled."""
    if not 1 <= row <= 7:
        raise ValueError(f"ablation row {row} outside 1..7")
    return {name: i < row - 1 for i, name in enumerate(TABLE3_TOGGLES)}


def profile(name: str) -> Config:
    """``paper``: full-size constants. ``desk``: N=1024, channels/4, 30 epochs."""
    cfg = Config()
    if name == "paper":
        return cfg
    if name == "desk":
        cfg.model.channels = (16, 32, 64, 128)
        cfg.model.flow_channels = 32
        cfg.model.seg_widths = (32, 16, 1)
        cfg.model.flow_widths = (32, 16, 3)
        cfg.model.conf_widths = (32, 1)
        cfg.train.n_points = 1024
        cfg.train.epochs = 30
        cfg.train.decay_epochs = 10
        cfg.scene = {"n_points": 1024}
        return cfg
    raise ValueError(f"unknown profile {name!r}")


def _parse(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return raw.strip()


def _apply(obj, section: dict, where: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, raw in section.items():
        if key not in names:
            raise KeyError(f"unknown key {key!r} in [{where}]")
        setattr(obj, key, _parse(raw, getattr(obj, key)))


def load_config(path: str | Path | None = None, profile_name: str = "desk",
                overrides: dict | None = None) -> Config:
    cfg = profile(profile_name)
    if path:
        parser = configparser.ConfigParser()
        with open(path) as f:
            parser.read_file(f)
        for sec in parser.sections():
            items = dict(parser.items(sec))
            if sec == "scene":
                cfg.scene.update(items)
            elif sec in ("model", "loss", "train"):
                _apply(getattr(cfg, sec), items, sec)
            else:
                raise KeyError(f"unknown config section [{sec}]")
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if sec == "scene":
            cfg.scene[key] = value
        else:
            if sec not in ("model", "loss", "train"):
                raise KeyError(f"unknown config section in {dotted!r}")
            target = getattr(cfg, sec)
            if key not in {f.name for f in dataclasses.fields(target)}:
                raise KeyError(f"unknown key {dotted!r}")
            setattr(target, key, _parse(str(value), getattr(target, key)) if isinstance(value, str) else value)
    return cfg


def dump_config(cfg: Config) -> str:
    lines = []
    for sec in ("model", "loss", "train"):
        lines.append(f"[{sec}]")
        for f in dataclasses.fields(getattr(cfg, sec)):
            v = getattr(getattr(cfg, sec), f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    if cfg.scene:
        lines.append("[scene]")
        for k, v in cfg.scene.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
