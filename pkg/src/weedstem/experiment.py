"""Experiment orchestration: configuration, the three run modes from the
ablation (regression_only / detection_plus_regression / ssl), checkpointing,
and report emission."""
from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import yaml

from .annotations import load_annotations
from .errors import ConfigError, DataError
from .evaluation import bbox_center_baseline, evaluate_detections
from .losses import LossWeights
from .network import DetectorConfig, init_params, load_checkpoint, save_checkpoint
from .ssl import SSLConfig, build_weed_bank, generate_pseudo_labels, pseudo_to_samples
from .synthetic import generate_scene
from .train import (evaluate_model, evaluate_regression_only, make_optimizer,
                    predictions_for, split_dataset, train_loop, train_student)
from .types import ImageSample, SyntheticSceneSpec

MODES = ("regression_only", "detection_plus_regression", "ssl")


@dataclass
class SyntheticDatasetConfig:
    count: int = 40
    image_size: int = 128
    crop_count: int = 2
    weed_count: int = 3
    stem_offset_mean: float = 0.2
    stem_offset_spread: float = 0.05
    clutter_level: float = 0.3


@dataclass
class DatasetConfig:
    source: str = "synthetic"            # "synthetic" | "directory"
    directory: Optional[str] = None
    synthetic: SyntheticDatasetConfig = field(default_factory=SyntheticDatasetConfig)


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9


@dataclass
class EvalConfig:
    conf_threshold: float = 0.15
    nms_iou: float = 0.45
    iou_floor: float = 0.3


@dataclass
class SSLRunConfig:
    labeled_fraction: float = 0.2
    pseudo_rounds: int = 2
    steps_per_round: int = 100
    tau: float = 0.5
    xi: float = 0.4
    ema_momentum: float = 0.9
    unlabeled_batch_ratio: float = 1.0
    bank_capacity: int = 4096
    augmentation_routing: str = "paper"
    on_empty_bank: str = "error"
    pseudo_conf_decode_threshold: float = 0.15

    def to_ssl_config(self) -> SSLConfig:
        return SSLConfig(
            tau=self.tau, xi=self.xi, ema_momentum=self.ema_momentum,
            unlabeled_batch_ratio=self.unlabeled_batch_ratio,
            bank_capacity=self.bank_capacity,
            augmentation_routing=self.augmentation_routing,
            on_empty_bank=self.on_empty_bank,
        )


def default_anchors(image_size: int) -> Tuple[Tuple[float, float], ...]:
    scale = image_size / 256.0
    return ((24.0 * scale, 24.0 * scale), (40.0 * scale, 40.0 * scale))


def default_detector_config(image_size: int) -> DetectorConfig:
    # 3 stride-2 stages -> 8 px cells at any input size; small cells keep
    # sub-cell stem regression precise while the 3x3 head supplies context
    return DetectorConfig(
        input_size=image_size,
        grid_size=image_size // 8,
        anchors=default_anchors(image_size),
        num_classes=4,
        channels=(12, 24, 48),
    )


@dataclass
class ExperimentConfig:
    mode: str = "detection_plus_regression"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    detector: Optional[DetectorConfig] = None
    loss: LossWeights = field(default_factory=LossWeights)
    ssl: SSLRunConfig = field(default_factory=SSLRunConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 50
    batch_size: int = 8
    augment: str = "strong"              # "strong" | "weak" | "none"
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.augment not in ("strong", "weak", "none"):
            raise ConfigError(f"augment must be strong, weak, or none, got {self.augment!r}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.detector is None:
            size = (self.dataset.synthetic.image_size
                    if self.dataset.source == "synthetic" else 256)
            self.detector = default_detector_config(size)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "seed": self.seed,
            "dataset": {
                "source": self.dataset.source,
                "directory": self.dataset.directory,
                "synthetic": asdict(self.dataset.synthetic),
            },
            "split": list(self.split),
            "detector": self.detector.to_dict(),
            "loss": asdict(self.loss),
            "ssl": asdict(self.ssl),
            "optimizer": asdict(self.optimizer),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "augment": self.augment,
            "eval": asdict(self.eval),
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        ds = d.get("dataset", {})
        dataset = DatasetConfig(
            source=ds.get("source", "synthetic"),
            directory=ds.get("directory"),
            synthetic=SyntheticDatasetConfig(**ds.get("synthetic", {})),
        )
        detector = DetectorConfig.from_dict(d["detector"]) if d.get("detector") else None
        return ExperimentConfig(
            mode=d.get("mode", "detection_plus_regression"),
            seed=int(d.get("seed", 0)),
            dataset=dataset,
            split=tuple(d.get("split", (0.8, 0.1, 0.1))),
            detector=detector,
            loss=LossWeights(**d.get("loss", {})),
            ssl=SSLRunConfig(**d.get("ssl", {})),
            optimizer=OptimizerConfig(**d.get("optimizer", {})),
            epochs=int(d.get("epochs", 50)),
            batch_size=int(d.get("batch_size", 8)),
            augment=d.get("augment", "strong"),
            eval=EvalConfig(**d.get("eval", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @staticmethod
    def load(path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass
class RunRecord:
    config: dict
    epoch_summaries: List[dict]
    final_metrics: dict
    extras: dict
    wall_clock_s: float
    checkpoint_path: Optional[str]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "epoch_summaries": self.epoch_summaries,
            "final_metrics": self.final_metrics,
            "extras": self.extras,
            "wall_clock_s": self.wall_clock_s,
            "checkpoint_path": self.checkpoint_path,
        }


def build_dataset(config: ExperimentConfig) -> List[ImageSample]:
    if config.dataset.source == "synthetic":
        s = config.dataset.synthetic
        if s.count < 1:
            raise DataError("synthetic dataset count must be >= 1")
        return [
            generate_scene(SyntheticSceneSpec(
                seed=config.seed * 100_000 + i,
                image_size=s.image_size,
                crop_count=s.crop_count,
                weed_count=s.weed_count,
                stem_offset_mean=s.stem_offset_mean,
                stem_offset_spread=s.stem_offset_spread,
                clutter_level=s.clutter_level,
            ))
            for i in range(s.count)
        ]
    if config.dataset.source == "directory":
        if not config.dataset.directory:
            raise ConfigError("dataset.directory is required for source 'directory'")
        samples = load_annotations(config.dataset.directory)
        if not samples:
            raise DataError(f"no images found in {config.dataset.directory}")
        return samples
    raise ConfigError(f"unknown dataset source {config.dataset.source!r}")


def _epoch_summaries(history, steps_per_epoch: int) -> List[dict]:
    out = []
    for e in range(0, len(history), steps_per_epoch):
        chunk = history[e : e + steps_per_epoch]
        out.append({
            "epoch": e // steps_per_epoch,
            "l_cls": float(np.mean([b.l_cls for b in chunk])),
            "l_bbox": float(np.mean([b.l_bbox for b in chunk])),
            "l_reg": float(np.mean([b.l_reg for b in chunk])),
            "total": float(np.mean([b.total for b in chunk])),
        })
    return out


def _val_dist(params, samples, config: ExperimentConfig) -> float:
    if not samples:
        return float("inf")
    report = evaluate_model(params, samples, config.detector,
                            config.eval.conf_threshold, config.eval.nms_iou,
                            config.eval.iou_floor)
    return report.mean_dist if report.mean_dist is not None else float("inf")


def run_experiment(config: ExperimentConfig, output_dir=None) -> RunRecord:
    """Deterministic given config.seed on a single-threaded run."""
    t0 = time.monotonic()
    config_echo = config.to_dict()
    samples = build_dataset(config)
    labeled_pool = [s for s in samples if s.labeled]
    if not labeled_pool:
        raise DataError("dataset contains no labeled samples")
    train_set, val_set, test_set = split_dataset(labeled_pool, tuple(config.split), config.seed)
    if not train_set:
        raise DataError("train split is empty")
    pre_unlabeled = [s for s in samples if not s.labeled]

    rng = np.random.default_rng(config.seed + 1)
    det_cfg = config.detector
    params = init_params(det_cfg, seed=config.seed)
    steps_per_epoch = max(1, int(np.ceil(len(train_set) / config.batch_size)))
    augment_kind = None if config.augment == "none" else config.augment
    extras: dict = {}

    out_path = Path(output_dir) if output_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    loss_log = open(out_path / "loss_log.jsonl", "w") if out_path is not None else None

    try:
        if config.mode == "regression_only":
            weights = LossWeights(0.0, 0.0, config.loss.gamma or 1.0)
            optimizer = make_optimizer(config.optimizer.kind, config.optimizer.lr,
                                       config.optimizer.momentum)
            params, _, history = train_loop(
                train_set, [], params, det_cfg, weights, optimizer,
                steps=config.epochs * steps_per_epoch, batch_size=config.batch_size,
                rng=rng, regression_only=True, augment_kind=augment_kind,
                loss_log=loss_log,
            )
            dist = evaluate_regression_only(params, test_set, det_cfg)
            final_metrics = {
                "mean_dist": dist,
                "mean_dist_cells": dist / det_cfg.cell_size if dist is not None else None,
            }
        elif config.mode == "detection_plus_regression":
            optimizer = make_optimizer(config.optimizer.kind, config.optimizer.lr,
                                       config.optimizer.momentum)
            params, _, history = train_loop(
                train_set, [], params, det_cfg, config.loss, optimizer,
                steps=config.epochs * steps_per_epoch, batch_size=config.batch_size,
                rng=rng, augment_kind=augment_kind, loss_log=loss_log,
            )
            report = evaluate_model(params, test_set, det_cfg, config.eval.conf_threshold,
                                    config.eval.nms_iou, config.eval.iou_floor)
            final_metrics = report.to_dict()
            preds = predictions_for(params, test_set, det_cfg,
                                    config.eval.conf_threshold, config.eval.nms_iou)
            base = evaluate_detections([bbox_center_baseline(p) for p in preds],
                                       [s.instances for s in test_set],
                                       iou_floor=config.eval.iou_floor,
                                       cell_size=det_cfg.cell_size)
            extras["bbox_center_baseline"] = base.to_dict()
        elif config.mode == "ssl":
            # carve a labeled/unlabeled partition out of the train split
            n_lab = max(1, int(round(config.ssl.labeled_fraction * len(train_set))))
            labeled = train_set[:n_lab]
            unlabeled = [s.copy_with(instances=[], labeled=False) for s in train_set[n_lab:]]
            unlabeled.extend(pre_unlabeled)
            ssl_cfg = config.ssl.to_ssl_config()

            optimizer = make_optimizer(config.optimizer.kind, config.optimizer.lr,
                                       config.optimizer.momentum)
            params, _, history = train_loop(
                labeled, [], params, det_cfg, config.loss, optimizer,
                steps=config.epochs * steps_per_epoch, batch_size=config.batch_size,
                rng=rng, augment_kind=augment_kind, loss_log=loss_log,
            )
            teacher = {k: v.copy() for k, v in params.items()}
            teacher_report = evaluate_model(teacher, test_set, det_cfg,
                                            config.eval.conf_threshold,
                                            config.eval.nms_iou, config.eval.iou_floor)
            extras["teacher_metrics"] = teacher_report.to_dict()

            student = {k: v.copy() for k, v in params.items()}
            best_params = {k: v.copy() for k, v in teacher.items()}
            best_val = _val_dist(teacher, val_set, config)
            opt = make_optimizer(config.optimizer.kind, config.optimizer.lr,
                                 config.optimizer.momentum)
            rounds = []
            for rnd in range(config.ssl.pseudo_rounds):
                bank = build_weed_bank(teacher, labeled, det_cfg,
                                       capacity=ssl_cfg.bank_capacity, seed=config.seed)
                results = generate_pseudo_labels(
                    teacher, unlabeled, bank, ssl_cfg, det_cfg,
                    conf_decode_threshold=config.ssl.pseudo_conf_decode_threshold,
                    nms_iou=config.eval.nms_iou, seed=config.seed + 100 + rnd,
                )
                pseudo = pseudo_to_samples(results)
                if out_path is not None:
                    from .ssl import save_pseudo_cache
                    save_pseudo_cache(out_path / f"pseudo_round_{rnd}.jsonl", results)
                student, teacher, h = train_student(
                    labeled, pseudo, student, teacher, ssl_cfg, config.loss,
                    steps=config.ssl.steps_per_round, det_cfg=det_cfg, optimizer=opt,
                    batch_size=config.batch_size, rng=rng, loss_log=loss_log,
                )
                history.extend(h)
                val = _val_dist(student, val_set, config)
                rounds.append({"round": rnd, "n_pseudo_images": len(pseudo),
                               "n_pseudo_labels": sum(len(l) for _, l in results),
                               "val_dist": None if np.isinf(val) else val})
                # only displace the current best on a decisive validation win;
                # noise-level improvements keep the safer earlier model
                if val < 0.9 * best_val:
                    best_val = val
                    best_params = {k: v.copy() for k, v in student.items()}
            extras["ssl_rounds"] = rounds
            params = best_params
            report = evaluate_model(params, test_set, det_cfg, config.eval.conf_threshold,
                                    config.eval.nms_iou, config.eval.iou_floor)
            final_metrics = report.to_dict()
        else:  # pragma: no cover
            raise ConfigError(config.mode)
    finally:
        if loss_log is not None:
            loss_log.close()

    checkpoint_path = None
    if out_path is not None:
        checkpoint_path = str(out_path / "checkpoint.npz")
        save_checkpoint(checkpoint_path, params, det_cfg, step=len(history))

    return RunRecord(
        config=config_echo,
        epoch_summaries=_epoch_summaries(history, steps_per_epoch),
        final_metrics=final_metrics,
        extras=extras,
        wall_clock_s=time.monotonic() - t0,
        checkpoint_path=checkpoint_path,
    )


def emit_report(record: RunRecord, output_dir) -> None:
    """Write metrics JSON, a loss-curve plot, and qualitative stem overlays
    (predicted stems green, ground truth red) for the test split."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(record.to_dict(), indent=2))

    if record.epoch_summaries:
        fig, ax = plt.subplots(figsize=(7, 4))
        epochs = [e["epoch"] for e in record.epoch_summaries]
        for key in ("l_cls", "l_bbox", "l_reg", "total"):
            ax.plot(epochs, [e[key] for e in record.epoch_summaries], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", dpi=120)
        plt.close(fig)

    if record.checkpoint_path and Path(record.checkpoint_path).exists():
        config = ExperimentConfig.from_dict(record.config)
        params, det_cfg, _ = load_checkpoint(record.checkpoint_path)
        samples = build_dataset(config)
        labeled_pool = [s for s in samples if s.labeled]
        _, _, test_set = split_dataset(labeled_pool, tuple(config.split), config.seed)
        overlays = out / "overlays"
        overlays.mkdir(exist_ok=True)
        preds_all = predictions_for(params, test_set[:8], det_cfg,
                                    config.eval.conf_threshold, config.eval.nms_iou)
        for sample, preds in zip(test_set[:8], preds_all):
            fig, ax = plt.subplots(figsize=(5, 5))
            ax.imshow(sample.image)
            for p in preds:
                if p.stem is not None:
                    ax.plot(p.stem[0], p.stem[1], "o", color="lime", markersize=6)
            for t in sample.instances:
                if t.is_weed:
                    ax.plot(t.stem[0], t.stem[1], "o", color="red", markersize=4)
            ax.set_axis_off()
            fig.tight_layout()
            fig.savefig(overlays / f"{sample.id}.png", dpi=100)
            plt.close(fig)
