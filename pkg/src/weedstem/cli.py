"""Command-line interface.

Environment:
  WEEDSTEM_OUTPUT_ROOT    default root for run outputs (default ./runs)
  WEEDSTEM_DETERMINISTIC  set to 1 to force the pure-numpy kernel path
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import click

from .annotations import load_annotations, save_annotations, write_manifest
from .evaluation import LaserModel, default_kill_radius, threshold_sweep
from .experiment import ExperimentConfig, emit_report, run_experiment
from .network import load_checkpoint
from .ssl import SSLConfig, build_weed_bank, generate_pseudo_labels, save_pseudo_cache
from .synthetic import generate_scene
from .train import (compute_anchors, evaluate_model, predictions_for,
                    raw_outputs_for)
from .types import SyntheticSceneSpec


def _output_root() -> Path:
    return Path(os.environ.get("WEEDSTEM_OUTPUT_ROOT", "runs"))


@click.group()
def main():
    """Crop/weed detection with weed-stem localization."""


@main.command()
@click.option("--count", default=40, show_default=True)
@click.option("--image-size", default=128, show_default=True)
@click.option("--crops", default=2, show_default=True)
@click.option("--weeds", default=3, show_default=True)
@click.option("--stem-offset-mean", default=0.2, show_default=True)
@click.option("--stem-offset-spread", default=0.05, show_default=True)
@click.option("--clutter", default=0.3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--unlabeled-fraction", default=0.0, show_default=True,
              help="fraction of scenes emitted without annotation files")
@click.argument("output_dir", type=click.Path())
def synth(count, image_size, crops, weeds, stem_offset_mean, stem_offset_spread,
          clutter, seed, unlabeled_fraction, output_dir):
    """Generate a synthetic dataset with annotations and a manifest."""
    samples = []
    n_unlabeled = int(round(unlabeled_fraction * count))
    for i in range(count):
        s = generate_scene(SyntheticSceneSpec(
            seed=seed + i, image_size=image_size, crop_count=crops, weed_count=weeds,
            stem_offset_mean=stem_offset_mean, stem_offset_spread=stem_offset_spread,
            clutter_level=clutter,
        ))
        if i >= count - n_unlabeled:
            s = s.copy_with(instances=[], labeled=False)
        samples.append(s)
    save_annotations(samples, output_dir)
    write_manifest(samples, output_dir)
    click.echo(f"wrote {count} scenes ({n_unlabeled} unlabeled) to {output_dir}")


@main.command()
@click.option("--k", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.argument("directory", type=click.Path(exists=True))
def anchors(k, seed, directory):
    """K-means anchor priors from a dataset's box dimensions."""
    samples = load_annotations(directory)
    priors = compute_anchors(samples, k, seed=seed)
    click.echo(json.dumps([[round(w, 2), round(h, 2)] for w, h in priors]))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML experiment config; defaults are used when omitted")
@click.option("--mode", type=click.Choice(["regression_only", "detection_plus_regression", "ssl"]),
              default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--output", "output_dir", type=click.Path(), default=None)
def train(config_path, mode, seed, epochs, output_dir):
    """Run a training experiment and emit its report."""
    config = ExperimentConfig.load(config_path) if config_path else ExperimentConfig()
    if mode is not None:
        config.mode = mode
    if seed is not None:
        config.seed = seed
    if epochs is not None:
        config.epochs = epochs
    out = Path(output_dir) if output_dir else _output_root() / f"{config.mode}_seed{config.seed}"
    record = run_experiment(config, output_dir=out)
    config.save(out / "config.yaml")
    emit_report(record, out)
    click.echo(json.dumps(record.final_metrics, indent=2))
    click.echo(f"outputs in {out}")


@main.command("pseudo-label")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--tau", default=0.5, show_default=True)
@click.option("--xi", default=0.4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--output", "output_path", type=click.Path(), default="pseudo_labels.jsonl")
@click.argument("directory", type=click.Path(exists=True))
def pseudo_label(checkpoint, tau, xi, seed, output_path, directory):
    """Generate a pseudo-label cache for the unlabeled images in a directory."""
    params, det_cfg, _ = load_checkpoint(checkpoint)
    samples = load_annotations(directory)
    labeled = [s for s in samples if s.labeled]
    unlabeled = [s for s in samples if not s.labeled]
    if not unlabeled:
        raise click.ClickException("no unlabeled images found")
    cfg = SSLConfig(tau=tau, xi=xi)
    bank = build_weed_bank(params, labeled, det_cfg, seed=seed)
    results = generate_pseudo_labels(params, unlabeled, bank, cfg, det_cfg, seed=seed)
    save_pseudo_cache(output_path, results)
    total = sum(len(l) for _, l in results)
    click.echo(f"wrote {total} pseudo labels for {len(unlabeled)} images to {output_path}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--conf-threshold", default=0.15, show_default=True)
@click.option("--iou-floor", default=0.3, show_default=True)
@click.argument("directory", type=click.Path(exists=True))
def eval_cmd(checkpoint, conf_threshold, iou_floor, directory):
    """Evaluate a checkpoint on an annotated directory."""
    params, det_cfg, _ = load_checkpoint(checkpoint)
    samples = [s for s in load_annotations(directory) if s.labeled]
    report = evaluate_model(params, samples, det_cfg, conf_threshold=conf_threshold,
                            iou_floor=iou_floor)
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--thresholds", default="0.05,0.1,0.15,0.3,0.5", show_default=True)
@click.option("--output", "output_path", type=click.Path(), default="sweep.csv")
@click.argument("directory", type=click.Path(exists=True))
def sweep(checkpoint, thresholds, output_path, directory):
    """Confidence-threshold sweep; writes a CSV of (threshold, fp, dist)."""
    params, det_cfg, _ = load_checkpoint(checkpoint)
    samples = [s for s in load_annotations(directory) if s.labeled]
    raws = raw_outputs_for(params, samples, det_cfg)
    ts = sorted(float(t) for t in thresholds.split(","))
    rows = threshold_sweep(raws, [s.instances for s in samples], ts, det_cfg)
    with open(output_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fp_rate", "mean_dist", "n_predictions", "n_matched_weeds"])
        for r in rows:
            writer.writerow([r.threshold, r.fp_rate, r.mean_dist, r.n_predictions, r.n_matched_weeds])
    click.echo(f"wrote {len(rows)} rows to {output_path}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--kill-radius", type=float, default=None,
              help="defaults to 0.1 x mean weed bbox diagonal")
@click.option("--max-shots", default=1, show_default=True)
@click.option("--shot-log", "shot_log_path", type=click.Path(), default=None)
@click.argument("directory", type=click.Path(exists=True))
def simulate(checkpoint, kill_radius, max_shots, shot_log_path, directory):
    """Laser-weeding simulation: weeding accuracy and energy cost."""
    from .evaluation import simulate_weeding

    params, det_cfg, _ = load_checkpoint(checkpoint)
    samples = [s for s in load_annotations(directory) if s.labeled]
    truths = [s.instances for s in samples]
    if kill_radius is None:
        kill_radius = default_kill_radius(truths)
    laser = LaserModel(kill_radius=kill_radius, max_shots_per_target=max_shots)
    preds_all = predictions_for(params, samples, det_cfg)
    weeds = shots = kills = 0
    log_lines = []
    for sample, preds in zip(samples, preds_all):
        _, _, shot_log = simulate_weeding(preds, sample.instances, laser)
        weeds += sum(1 for t in sample.instances if t.is_weed)
        shots += len(shot_log)
        kills += sum(1 for s_ in shot_log if s_.hit)
        log_lines.extend(
            f"{sample.id} {s_.point[0]:.2f} {s_.point[1]:.2f} {int(s_.hit)} {s_.target_id}"
            for s_ in shot_log
        )
    if shot_log_path:
        Path(shot_log_path).write_text("\n".join(log_lines) + "\n")
    result = {
        "kill_radius": kill_radius,
        "weeding_accuracy": kills / weeds if weeds else None,
        "energy_cost": shots / weeds if weeds else None,
        "n_weeds": weeds, "n_shots": shots, "n_kills": kills,
    }
    click.echo(json.dumps(result, indent=2))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True))
def report(run_dir):
    """Re-emit plots and metrics for a finished run directory."""
    from .experiment import RunRecord

    metrics_path = Path(run_dir) / "metrics.json"
    if not metrics_path.exists():
        raise click.ClickException(f"{metrics_path} not found; run `weedstem train` first")
    d = json.loads(metrics_path.read_text())
    record = RunRecord(
        config=d["config"], epoch_summaries=d["epoch_summaries"],
        final_metrics=d["final_metrics"], extras=d["extras"],
        wall_clock_s=d["wall_clock_s"], checkpoint_path=d["checkpoint_path"],
    )
    emit_report(record, run_dir)
    click.echo(f"report refreshed in {run_dir}")


if __name__ == "__main__":
    main()
