"""End-to-end jobs shared by the CLI and the acceptance suite: build a
model for a dataset, run pretraining/finetuning with logs and checkpoints,
score retrieval on the held-out identities, export Grad-CAM maps, and the
three-arm masking ablation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import figures
from . import gradcam as gc
from .datagen import SyntheticDataset, generate_dataset, split_dataset
from .errors import ConfigError, UsageError
from .evaluation import EvalResult, distance_matrix, evaluate, extract_features
from .model import Model, load_checkpoint, load_into_model
from .runconfig import dataset_kwargs, model_config, train_config
from .textproc import Vocabulary, build_vocab
from .train import (TrainLog, TrainState, identity_class_map, load_train_state,
                    new_train_state, run_finetune, run_pretraining,
                    save_train_state)


def synthesize(cfg: dict) -> SyntheticDataset:
    return generate_dataset(**dataset_kwargs(cfg))


def vocab_for(dataset: SyntheticDataset) -> Vocabulary:
    return build_vocab(s.caption for s in dataset.samples)


def build_model(cfg: dict, vocab: Vocabulary, seed: int) -> Model:
    mc = model_config(cfg, vocab_size=len(vocab))
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(7,))))
    return Model(mc, rng)


def _train_samples(cfg: dict, dataset: SyntheticDataset, train_on_all: bool):
    if train_on_all:
        return list(dataset.samples)
    train, _, _ = split_dataset(dataset, cfg["dataset"]["eval_identities"])
    return train


def _finish_run(state: TrainState, log: TrainLog, run_dir: Optional[Path]):
    if run_dir is None:
        return
    run_dir = Path(run_dir)
    save_train_state(run_dir / "checkpoint.bin", state)
    if state.history:
        last = state.history[-1]
        (run_dir / "loss_report.json").write_text(json.dumps({
            "values": last.values, "counts": last.counts, "total": last.total,
        }, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if log.path and log.path.exists():
        figures.loss_curves(log.path, run_dir / "loss_curves.png")


def run_pretrain_job(cfg: dict, dataset: SyntheticDataset,
                     run_dir: Optional[Path] = None,
                     resume: Optional[str] = None,
                     seed: Optional[int] = None,
                     stop_at: Optional[int] = None) -> TrainState:
    vocab = vocab_for(dataset)
    if resume is not None:
        state = load_train_state(resume)
        if state.config.mode != "pretrain":
            raise ConfigError(f"{resume} is not a pretraining checkpoint")
    else:
        tc = train_config(cfg, "pretrain")
        if seed is not None:
            tc = replace(tc, seed=seed)
        state = new_train_state(build_model(cfg, vocab, tc.seed), tc)
    samples = _train_samples(cfg, dataset, train_on_all=False)
    log = TrainLog(Path(run_dir) / "train_log.csv" if run_dir else None)
    run_pretraining(state, samples, vocab, log, stop_at=stop_at)
    _finish_run(state, log, run_dir)
    return state


def run_finetune_job(cfg: dict, dataset: SyntheticDataset,
                     run_dir: Optional[Path] = None,
                     init_checkpoint: Optional[str] = None,
                     init_model: Optional[Model] = None,
                     resume: Optional[str] = None,
                     seed: Optional[int] = None,
                     train_on_all: bool = False,
                     stop_at: Optional[int] = None) -> TrainState:
    """Supervised finetuning; optionally initialized from a pretraining
    checkpoint (encoder weights are copied, heads start fresh)."""
    vocab = vocab_for(dataset)
    samples = _train_samples(cfg, dataset, train_on_all)
    class_of = identity_class_map(samples)
    if resume is not None:
        state = load_train_state(resume)
        if state.config.mode != "finetune":
            raise ConfigError(f"{resume} is not a finetuning checkpoint")
    else:
        tc = train_config(cfg, "finetune")
        if seed is not None:
            tc = replace(tc, seed=seed)
        if init_model is not None:
            model = init_model
        else:
            model = build_model(cfg, vocab, tc.seed)
            if init_checkpoint is not None:
                arrays, _ = load_checkpoint(init_checkpoint)
                load_into_model(model, {n: a for n, a in arrays.items()
                                        if not n.startswith("opt.")})
        feat_dim = (model.cfg.fused_width if tc.feature_source == "cls_m"
                    else model.cfg.image.width)
        model.ensure_id_head(len(class_of), feat_dim, np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=tc.seed, spawn_key=(8,)))))
        state = new_train_state(model, tc)
    log = TrainLog(Path(run_dir) / "train_log.csv" if run_dir else None)
    run_finetune(state, samples, vocab, class_of, log, stop_at=stop_at)
    _finish_run(state, log, run_dir)
    return state


def evaluate_model(cfg: dict, model: Model, dataset: SyntheticDataset,
                   run_dir: Optional[Path] = None) -> EvalResult:
    """Retrieval scoring on the held-out identity split."""
    _, query, gallery = split_dataset(dataset, cfg["dataset"]["eval_identities"])
    ecfg = cfg["eval"]
    vocab = vocab_for(dataset) if ecfg["feature_path"] == "multimodal" else None
    qf = extract_features(model, query, ecfg["batch_size"], ecfg["feature_path"], vocab)
    gf = extract_features(model, gallery, ecfg["batch_size"], ecfg["feature_path"], vocab)
    dist = distance_matrix(qf.features, gf.features)
    result = evaluate(dist, qf.identities, qf.cameras, gf.identities, gf.cameras,
                      max_rank=ecfg["max_rank"])
    if run_dir is not None:
        out = Path(run_dir) / "eval"
        result.write(out)
        figures.cmc_chart(out / "eval_result.json", out / "cmc_curve.png")
    return result


def gradcam_job(cfg: dict, model: Model, dataset: SyntheticDataset,
                indices: Sequence[int], run_dir: Path,
                feature_source: str = "cls_m") -> List[Path]:
    """Heatmap exports (PGM, PPM overlay, CSV grid, PNG figure) per sample."""
    out = Path(run_dir) / "gradcam"
    out.mkdir(parents=True, exist_ok=True)
    train, _, _ = split_dataset(dataset, cfg["dataset"]["eval_identities"])
    class_of = identity_class_map(train)
    written = []
    for index in indices:
        if not 0 <= index < len(dataset.samples):
            raise UsageError(f"sample index {index} outside the dataset "
                             f"(0..{len(dataset.samples) - 1})")
        sample = dataset.samples[index]
        target = class_of.get(sample.identity)  # argmax for held-out identities
        heatmap = gc.grad_cam(model, sample.image, target,
                              block=cfg["gradcam"]["block"],
                              feature_source=feature_source)
        stem = out / f"sample{index:06d}"
        gc.write_pgm(heatmap, stem.with_suffix(".pgm"))
        gc.write_overlay_ppm(heatmap, sample.image, stem.with_name(stem.name + "_overlay.ppm"))
        gc.write_grid_csv(heatmap, stem.with_suffix(".csv"))
        figures.heatmap_figure(sample.image, heatmap.grid, sample.bbox,
                               stem.with_suffix(".png"))
        written.append(stem)
    return written


# ---------------------------------------------------------------------------
# masking ablation: no pretrain / random masking / region masking
# ---------------------------------------------------------------------------

ABLATION_ARMS = ("baseline", "random_mask", "region_mask")


@dataclass
class AblationResult:
    per_seed: Dict[str, List[EvalResult]]   # arm -> one result per seed
    untrained: List[EvalResult]

    def median_map(self, arm: str) -> float:
        return float(np.median([r.mean_ap for r in self.per_seed[arm]]))

    def median_rank1(self, arm: str) -> float:
        return float(np.median([r.rank(1) for r in self.per_seed[arm]]))

    @property
    def untrained_median_map(self) -> float:
        return float(np.median([r.mean_ap for r in self.untrained]))


def run_ablation(cfg: dict, dataset: SyntheticDataset, seeds: Sequence[int],
                 run_dir: Optional[Path] = None) -> AblationResult:
    """Three training arms under identical budgets, differing only in
    pretraining; plus the untrained-features floor."""
    per_seed: Dict[str, List[EvalResult]] = {arm: [] for arm in ABLATION_ARMS}
    untrained: List[EvalResult] = []
    vocab = vocab_for(dataset)
    for seed in seeds:
        untrained.append(evaluate_model(cfg, build_model(cfg, vocab, seed), dataset))

        tuned = run_finetune_job(cfg, dataset, seed=seed)
        per_seed["baseline"].append(evaluate_model(cfg, tuned.model, dataset))

        for arm, strategy in (("random_mask", "random"), ("region_mask", "region")):
            arm_cfg = json.loads(json.dumps(cfg))
            arm_cfg["pretrain"]["mask_strategy"] = strategy
            pre = run_pretrain_job(arm_cfg, dataset, seed=seed)
            tuned = run_finetune_job(arm_cfg, dataset, init_model=pre.model, seed=seed)
            per_seed[arm].append(evaluate_model(arm_cfg, tuned.model, dataset))

    result = AblationResult(per_seed, untrained)
    if run_dir is not None:
        _write_ablation(result, Path(run_dir))
    return result


def _write_ablation(result: AblationResult, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    with open(run_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "mAP", "rank1"])
        for arm in ABLATION_ARMS:
            row = (arm, result.median_map(arm), result.median_rank1(arm))
            rows.append(row)
            writer.writerow([arm, repr(row[1]), repr(row[2])])
    summary = {
        "untrained_mAP": result.untrained_median_map,
        **{f"{arm}_mAP": result.median_map(arm) for arm in ABLATION_ARMS},
        **{f"{arm}_rank1": result.median_rank1(arm) for arm in ABLATION_ARMS},
    }
    (run_dir / "ablation_summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    figures.ablation_chart(rows, run_dir / "ablation.png")
