"""Declarative run configuration: one JSON document drives every command.

``default_config`` holds the desk-scale toy defaults (20 identities at
64x32, width-64 depth-2 encoders, 200 finetune steps). A user file is
merged over the defaults, then ``--set a.b=value`` flags over that; the
effective document is validated up front and echoed into the run
directory before any compute.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Dict, List, Optional

from .errors import ConfigError
from .model import EncoderConfig, ModelConfig
from .train import TrainConfig


def default_config() -> dict:
    encoder = {"depth": 2, "width": 64, "heads": 4, "mlp_ratio": 2,
               "max_positions": 64}
    return {
        "dataset": {
            "num_identities": 20,
            "images_per_identity": 8,
            "num_cameras": 4,
            "height": 64,
            "width": 32,
            "seed": 0,
            "domain": 0,
            "bbox_area_range": [0.22, 0.50],
            "eval_identities": 6,
        },
        "model": {
            "patch_size": 16,
            "caption_len": 16,
            "image": dict(encoder),
            "text": dict(encoder),
            "fusion": dict(encoder),
        },
        # desk-scale schedule; the 1e-3 / 0.1 full-scale settings are the
        # TrainConfig dataclass defaults
        "pretrain": {
            "lr": 0.05,
            "momentum": 0.9,
            "weight_decay": 0.001,
            "warmup_steps": 10,
            "total_steps": 150,
            "batch_size": 32,
            "image_mask_ratio": 0.15,
            "text_mask_ratio": 0.15,
            "mask_strategy": "region",
            "seed": 0,
            "unimodal_in_paired": False,
            "loss_weights": {},
        },
        "finetune": {
            "lr": 0.05,
            "momentum": 0.9,
            "weight_decay": 0.001,
            "warmup_steps": 10,
            "total_steps": 200,
            "batch_size": 32,
            "p": 8,
            "k": 4,
            "margin": 0.3,
            "seed": 0,
            "feature_source": "cls_m",
            "caption_dropout": 0.0,
            "triplet_mining": "batch_hard",
        },
        "eval": {
            "max_rank": 10,
            "feature_path": "image",
            "batch_size": 32,
        },
        "gradcam": {
            "block": None,
        },
    }


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(cfg: dict, assignments: List[str]) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON when they can."""
    cfg = copy.deepcopy(cfg)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
    return cfg


def load_config(path: Optional[str] = None,
                overrides: Optional[List[str]] = None) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _deep_merge(cfg, user)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------

def dataset_kwargs(cfg: dict) -> dict:
    d = cfg["dataset"]
    return {
        "num_identities": d["num_identities"],
        "images_per_identity": d["images_per_identity"],
        "num_cameras": d["num_cameras"],
        "seed": d["seed"],
        "height": d["height"],
        "width": d["width"],
        "bbox_area_range": tuple(d["bbox_area_range"]),
        "domain": d["domain"],
    }


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        patch_size=m["patch_size"],
        caption_len=m["caption_len"],
        vocab_size=vocab_size,
        image=EncoderConfig(**m["image"]),
        text=EncoderConfig(**m["text"]),
        fusion=EncoderConfig(**m["fusion"]),
    )


def train_config(cfg: dict, mode: str) -> TrainConfig:
    section = dict(cfg[mode])
    tc = TrainConfig(mode=mode, **section)
    tc.validate()
    return tc


def validate_config(cfg: dict) -> None:
    """Construct every typed view so all field errors surface up front."""
    problems = []
    d = cfg["dataset"]
    for key in ("num_identities", "images_per_identity", "num_cameras"):
        if not isinstance(d[key], int) or d[key] < 1:
            problems.append(f"dataset.{key} must be a positive integer")
    if not 0 < d["eval_identities"] < d["num_identities"]:
        problems.append("dataset.eval_identities must lie strictly between 0 "
                        "and dataset.num_identities")
    m = cfg["model"]
    if d["height"] % m["patch_size"] or d["width"] % m["patch_size"]:
        problems.append(
            f"image {d['height']}x{d['width']} is not divisible by "
            f"model.patch_size {m['patch_size']}")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    model_config(cfg, vocab_size=8)
    train_config(cfg, "pretrain")
    train_config(cfg, "finetune")
    if cfg["eval"]["max_rank"] < 1:
        raise ConfigError("eval.max_rank must be >= 1")
    if cfg["eval"]["feature_path"] not in ("image", "multimodal"):
        raise ConfigError("eval.feature_path must be image or multimodal")


def write_effective_config(cfg: dict, run_dir) -> None:
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / "config.json").write_text(
        json.dumps(cfg, indent=1, sort_keys=True) + "\n", encoding="utf-8")
