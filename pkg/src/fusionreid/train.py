"""Optimization loops: masked pretraining over round-robin modalities and
supervised finetuning on PK batches, under a warmup+cosine SGD schedule.

Every step checks that exactly the structurally reachable parameters
received gradients before updating them, so a loss can never update a
parameter it cannot reach. All randomness flows through one generator
whose state is checkpointed, making split-and-resume bit-exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import autodiff as ad
from . import losses as ls
from .datagen import PKBatch, Sample, pk_batches
from .errors import ConfigError, IntegrityError, UsageError
from .imageops import patchify, random_mask_plan, region_mask_plan
from .model import (EncoderConfig, Model, ModelConfig, load_checkpoint,
                    model_arrays, restore_model, save_checkpoint)
from .textproc import Vocabulary, encode, mask_tokens

MODALITY_CYCLE = ("image", "text", "paired")


@dataclass
class TrainConfig:
    mode: str = "finetune"            # "pretrain" | "finetune"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.1
    warmup_steps: int = 10
    total_steps: int = 100
    batch_size: int = 64
    p: int = 16
    k: int = 4
    image_mask_ratio: float = 0.15
    text_mask_ratio: float = 0.15
    mask_strategy: str = "region"     # "random" | "region"
    margin: float = 0.3
    seed: int = 0
    feature_source: str = "cls_m"     # "cls_m" | "cls_i"
    caption_dropout: float = 0.0      # P(empty caption per sample, finetune fused path)
    triplet_mining: str = "batch_hard"
    unimodal_in_paired: bool = False
    loss_weights: Dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        problems = []
        if self.mode not in ("pretrain", "finetune"):
            problems.append(f"mode must be pretrain or finetune, got {self.mode!r}")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay cannot be negative")
        if not 0 <= self.warmup_steps <= self.total_steps:
            problems.append("need 0 <= warmup_steps <= total_steps")
        if self.total_steps < 1:
            problems.append("total_steps must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        for name in ("image_mask_ratio", "text_mask_ratio"):
            if not 0.0 < getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in (0, 1)")
        if self.mask_strategy not in ("random", "region"):
            problems.append(f"mask_strategy must be random or region, got {self.mask_strategy!r}")
        if self.feature_source not in ("cls_m", "cls_i"):
            problems.append(f"feature_source must be cls_m or cls_i, got {self.feature_source!r}")
        if self.triplet_mining not in ("batch_hard", "random"):
            problems.append("triplet_mining must be batch_hard or random")
        if not 0.0 <= self.caption_dropout <= 1.0:
            problems.append("caption_dropout must lie in [0, 1]")
        if self.mode == "finetune":
            if self.p < 2 or self.k < 2:
                problems.append("finetune needs p >= 2 and k >= 2 for triplet mining")
            if self.batch_size != self.p * self.k:
                problems.append(
                    f"finetune batch_size {self.batch_size} must equal p*k = {self.p * self.k}")
        if problems:
            raise ConfigError("invalid training config: " + "; ".join(problems))


@dataclass
class TrainState:
    model: Model
    config: TrainConfig
    step: int
    momentum_buffers: Dict[str, np.ndarray]
    rng: np.random.Generator
    history: List[ls.LossReport] = field(default_factory=list)


def new_train_state(model: Model, config: TrainConfig) -> TrainState:
    config.validate()
    return TrainState(model, config, 0, {},
                      np.random.Generator(np.random.PCG64(
                          np.random.SeedSequence(entropy=config.seed, spawn_key=(9,)))))


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if step < 0:
        raise UsageError("lr_at: negative step")
    step = min(step, config.total_steps)
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span == 0:
        return config.lr
    phase = (step - config.warmup_steps) / span
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * phase))


def sgd_step(state: TrainState, gradients: Dict[str, np.ndarray], lr: float,
             param_names: Sequence[str]) -> None:
    """Decoupled weight decay, then momentum update, for the named params."""
    cfg = state.config
    for name in param_names:
        grad = gradients.get(name)
        if grad is None:
            raise IntegrityError(f"sgd_step: no gradient for parameter {name!r}")
        param = state.model.params[name]
        if cfg.weight_decay:
            param.data *= 1.0 - lr * cfg.weight_decay
        buf = state.momentum_buffers.get(name)
        if buf is None:
            buf = np.zeros_like(param.data)
            state.momentum_buffers[name] = buf
        buf *= cfg.momentum
        buf += grad
        param.data -= lr * buf


def _zero_grads(model: Model) -> None:
    for p in model.params.values():
        p.grad = None


def _collect_gradients(model: Model, expected: Set[str]) -> Dict[str, np.ndarray]:
    present = {n for n, p in model.params.items() if p.grad is not None}
    if present != expected:
        leaked = sorted(present - expected)
        missing = sorted(expected - present)
        raise IntegrityError(
            f"gradient bookkeeping violated: unexpected {leaked}, missing {missing}")
    return {n: model.params[n].grad for n in present}


def _names(model: Model, *prefixes: str) -> Set[str]:
    return {n for n in model.params if n.startswith(prefixes)}


# ---------------------------------------------------------------------------
# plan construction
# ---------------------------------------------------------------------------

def _image_plans(state: TrainState, grids, samples):
    cfg = state.config
    plans = []
    for grid, sample in zip(grids, samples):
        if cfg.mask_strategy == "region":
            plan = region_mask_plan(grid, sample.bbox, cfg.image_mask_ratio, state.rng)
        else:
            plan = random_mask_plan(grid.num_patches, cfg.image_mask_ratio, state.rng)
        plans.append(plan.with_targets(grid))
    return plans


def _text_inputs(state: TrainState, samples, vocab: Vocabulary, masked: bool):
    seqs, plans = [], []
    for s in samples:
        seq = encode(s.caption, vocab, state.model.cfg.caption_len)
        if masked:
            seq, plan = mask_tokens(seq, state.config.text_mask_ratio, vocab, state.rng)
            plans.append(plan)
        seqs.append(seq)
    return seqs, plans


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def pretrain_step(state: TrainState, batch: Sequence[Sample], modality: str,
                  vocab: Vocabulary) -> ls.LossReport:
    """One optimizer step on the losses the batch modality allows."""
    if modality not in MODALITY_CYCLE:
        raise UsageError(f"unknown batch modality {modality!r}")
    if not batch:
        raise UsageError("pretrain_step: empty batch")
    model = state.model
    cfg = state.config
    _zero_grads(model)
    components: Dict[str, Tuple] = {}
    expected: Set[str] = set()

    if modality == "image":
        grids = [patchify(s.image, model.cfg.patch_size) for s in batch]
        plans = _image_plans(state, grids, batch)
        enc = model.encode_image(grids, plans=plans)
        part = ls.mim_loss(model, enc, plans)
        if part is None:
            raise UsageError("image batch produced no masked patch; raise the mask ratio")
        components["mim"] = part
        expected |= _names(model, "img.", "head.mim.")

    elif modality == "text":
        seqs, plans = _text_inputs(state, batch, vocab, masked=True)
        part = ls.mlm_loss(model, model.encode_text(seqs), plans)
        if part is None:
            raise UsageError("text batch produced no masked token; raise the mask ratio")
        components["mlm"] = part
        expected |= _names(model, "txt.", "head.mlm.")

    else:  # paired: masked fused reconstruction + image-text matching
        grids = [patchify(s.image, model.cfg.patch_size) for s in batch]
        img_plans = _image_plans(state, grids, batch)
        seqs, txt_plans = _text_inputs(state, batch, vocab, masked=True)
        img_enc = model.encode_image(grids, plans=img_plans)
        txt_enc = model.encode_text(seqs)
        fused = model.fuse(img_enc, txt_enc)
        img_part, txt_part = ls.mmm_loss(model, fused, img_plans, txt_plans)
        if img_part is None and txt_part is None:
            raise UsageError("paired batch produced no masked position; raise the ratios")
        if img_part is not None:
            components["mmm_image"] = img_part
            expected |= _names(model, "head.mmm_img.")
        if txt_part is not None:
            components["mmm_text"] = txt_part
            expected |= _names(model, "head.mmm_txt.")

        # matching pass on clean inputs with identity-aware shuffled captions
        source, match_labels = ls.itm_caption_assignment(
            [s.identity for s in batch], state.rng)
        clean_seqs, _ = _text_inputs(state, batch, vocab, masked=False)
        itm_seqs = [clean_seqs[i] for i in source]
        itm_fused = model.fuse(model.encode_image(grids),
                               model.encode_text(itm_seqs))
        components["itm"] = ls.itm_loss(model, itm_fused, match_labels)
        expected |= _names(model, "img.", "txt.", "mm.", "head.itm.")
        if not any(len(p) for p in img_plans):
            expected.discard("img.mask")

        if cfg.unimodal_in_paired:
            mim_part = ls.mim_loss(model, img_enc, img_plans)
            if mim_part is not None:
                components["mim"] = mim_part
                expected |= _names(model, "head.mim.")
            mlm_part = ls.mlm_loss(model, txt_enc, txt_plans)
            if mlm_part is not None:
                components["mlm"] = mlm_part
                expected |= _names(model, "head.mlm.")

    total, report = _combine(components, cfg.loss_weights)
    ad.backward(total)
    grads = _collect_gradients(model, expected)
    sgd_step(state, grads, lr_at(state.step, cfg), sorted(expected))
    state.step += 1
    state.history.append(report)
    return report


def _combine(components, weights):
    return ls.combine_components(components, {**ls.DEFAULT_WEIGHTS, **(weights or {})})


def finetune_step(state: TrainState, batch: PKBatch, vocab: Vocabulary,
                  class_of: Dict[int, int]) -> ls.LossReport:
    """Identity + triplet step on a PK batch, per the finetuning objective."""
    model = state.model
    cfg = state.config
    if model.num_id_classes is None:
        raise UsageError("finetune_step: model has no identity head")
    try:
        labels = np.array([class_of[s.identity] for s in batch.samples])
    except KeyError as exc:
        raise UsageError(f"finetune_step: identity {exc} not in the class map") from None

    _zero_grads(model)
    grids = [patchify(s.image, model.cfg.patch_size) for s in batch.samples]
    img_enc = model.encode_image(grids)
    if cfg.feature_source == "cls_m":
        seqs, _ = _text_inputs(state, batch.samples, vocab, masked=False)
        if cfg.caption_dropout > 0.0:
            # fused features must survive missing text; mirrors image-only inference
            drop = state.rng.random(len(seqs)) < cfg.caption_dropout
            empty = encode("", vocab, state.model.cfg.caption_len)
            seqs = [empty if d else s for s, d in zip(seqs, drop)]
        feats = model.fuse(img_enc, model.encode_text(seqs)).cls()
        expected = _names(model, "img.", "txt.", "mm.", "head.id.")
    else:
        feats = img_enc.cls()
        expected = _names(model, "img.", "head.id.")
    expected.discard("img.mask")  # no mask plan in finetuning

    logits = model.head("id", feats)
    id_term = ls.id_loss(logits, labels)
    triplet_term = ls.triplet_loss(feats, labels, cfg.margin, cfg.triplet_mining,
                                   rng=state.rng)
    total = ls.total_finetune_loss(id_term, triplet_term)
    report = ls.LossReport(
        {"id": id_term.item(), "triplet": triplet_term.item()},
        {"id": len(batch.samples), "triplet": len(batch.samples)},
        total.item())

    ad.backward(total)
    grads = _collect_gradients(model, expected)
    sgd_step(state, grads, lr_at(state.step, cfg), sorted(expected))
    state.step += 1
    state.history.append(report)
    return report


# ---------------------------------------------------------------------------
# loops with CSV logging
# ---------------------------------------------------------------------------

LOG_HEADER = ["step", "phase", "lr"] + ls.LossReport.csv_header()


def _log_row(step: int, phase: str, lr: float, report: ls.LossReport) -> List[str]:
    return [str(step), phase, repr(lr)] + report.csv_row()


class TrainLog:
    """CSV training log; one row per optimizer step."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: List[List[str]] = []
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_HEADER)

    def append(self, row: List[str]) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


def run_pretraining(state: TrainState, samples: Sequence[Sample],
                    vocab: Vocabulary, log: Optional[TrainLog] = None,
                    stop_at: Optional[int] = None) -> TrainLog:
    """Round-robin image / text / paired steps up to total_steps.

    ``stop_at`` interrupts the run early (same schedule), for
    checkpoint-and-resume workflows.
    """
    cfg = state.config
    log = log or TrainLog()
    n = len(samples)
    if n < cfg.batch_size:
        raise ConfigError(f"dataset of {n} samples cannot fill batches of {cfg.batch_size}")
    last = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    while state.step < last:
        step = state.step
        modality = MODALITY_CYCLE[step % len(MODALITY_CYCLE)]
        idx = state.rng.choice(n, size=cfg.batch_size, replace=False)
        lr = lr_at(step, cfg)
        report = pretrain_step(state, [samples[i] for i in idx], modality, vocab)
        log.append(_log_row(step, modality, lr, report))
    return log


def run_finetune(state: TrainState, samples: Sequence[Sample], vocab: Vocabulary,
                 class_of: Dict[int, int], log: Optional[TrainLog] = None,
                 stop_at: Optional[int] = None) -> TrainLog:
    cfg = state.config
    log = log or TrainLog()
    last = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    while state.step < last:
        step = state.step
        batch = pk_batches(samples, cfg.p, cfg.k, state.rng, batches=1)[0]
        lr = lr_at(step, cfg)
        report = finetune_step(state, batch, vocab, class_of)
        log.append(_log_row(step, "finetune", lr, report))
    return log


def identity_class_map(samples: Sequence[Sample]) -> Dict[int, int]:
    return {identity: index
            for index, identity in enumerate(sorted({s.identity for s in samples}))}


# ---------------------------------------------------------------------------
# state checkpointing (model + optimizer + rng)
# ---------------------------------------------------------------------------

def _model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def _model_config_from(d: dict) -> ModelConfig:
    d = dict(d)
    for key in ("image", "text", "fusion"):
        d[key] = EncoderConfig(**d[key])
    return ModelConfig(**d)


def save_train_state(path, state: TrainState) -> None:
    arrays = dict(model_arrays(state.model))
    for name, buf in state.momentum_buffers.items():
        arrays[f"opt.{name}"] = buf
    meta = {
        "step": state.step,
        "train_config": asdict(state.config),
        "model_config": _model_config_dict(state.model.cfg),
        "rng_state": state.rng.bit_generator.state,
    }
    save_checkpoint(path, arrays, meta)


def load_train_state(path) -> TrainState:
    arrays, meta = load_checkpoint(path)
    if meta is None or "train_config" not in meta:
        raise IntegrityError(f"{path}: checkpoint has no trainer metadata")
    cfg = TrainConfig(**meta["train_config"])
    model_cfg = _model_config_from(meta["model_config"])
    model_params = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    model = restore_model(model_cfg, model_params, np.random.default_rng(cfg.seed))
    momentum = {n[len("opt."):]: a.copy() for n, a in arrays.items()
                if n.startswith("opt.")}
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(model, cfg, int(meta["step"]), momentum, rng)


def load_model_from_checkpoint(path, rng: Optional[np.random.Generator] = None) -> Model:
    arrays, meta = load_checkpoint(path)
    if meta is None or "model_config" not in meta:
        raise IntegrityError(f"{path}: checkpoint has no model config")
    model_cfg = _model_config_from(meta["model_config"])
    model_params = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    return restore_model(model_cfg, model_params, rng or np.random.default_rng(0))
