"""Command-line surface: data generation, training, pseudo-labeling,
evaluation, and timeline plotting.

Configs are layered (YAML file defaults, then dotted --set overrides); the
resolved config is persisted next to every artifact. Exit codes: 2 config
error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click
import numpy as np

from . import localize as localize_mod
from . import metrics as metrics_mod
from . import sampling as sampling_mod
from . import synthgen as synthgen_mod
from . import train as train_mod
from .core import Box, DatasetError, Detection, ResponseTrack, ScoreTimeline, load_dataset
from .heads import HeadConfig, VARIANTS
from .localize import HeadScorer, OracleScorer, PeakConfig, TrackerConfig

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _dataset_hash(dataset_dir: Path) -> str:
    ann = Path(dataset_dir) / "annotations.json"
    return hashlib.sha256(ann.read_bytes()).hexdigest() if ann.is_file() else ""


def _from_dict(cls, raw: dict, path: str = ""):
    """Build a dataclass from a dict, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        ftype = fields[key].type
        if isinstance(value, dict):
            sub = {"head": HeadConfig, "sampler": sampling_mod.SamplerConfig}.get(key)
            if sub is None:
                raise ConfigError(f"config key {path + key!r} does not take a mapping")
            kwargs[key] = _from_dict(sub, value, path=f"{path}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        dotted, value = item.split("=", 1)
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {dotted!r}")
        node[parts[-1]] = json.loads(value) if _json_like(value) else value
    return raw


def _json_like(value: str) -> bool:
    try:
        json.loads(value)
        return True
    except json.JSONDecodeError:
        return False


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    import yaml

    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return raw


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


@click.group()
def main():
    """Visual query localization laboratory."""


# ---------------------------------------------------------------------------
# synthgen
# ---------------------------------------------------------------------------


@main.command("synthgen")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--set", "overrides", multiple=True, help="dotted key=value override")
@click.option("--seed", type=int, default=None)
@click.option("--overwrite", is_flag=True)
def cmd_synthgen(out_dir, config_path, overrides, seed, overwrite):
    """Generate a synthetic dataset."""
    try:
        raw = _apply_overrides(_load_config_file(config_path), overrides)
        if seed is not None:
            raw["seed"] = seed
        raw.setdefault("seed", 0)
        spec = _from_dict(synthgen_mod.SceneSpec, raw)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        _fail(EXIT_DATA, f"{out} exists; pass --overwrite to regenerate")
    try:
        synthgen_mod.generate(spec, out)
    except OSError as e:
        _fail(EXIT_DATA, str(e))
    click.echo(f"wrote dataset to {out} ({spec.num_videos} videos)")


# ---------------------------------------------------------------------------
# pufs
# ---------------------------------------------------------------------------


def _pufs_records(dataset, config: sampling_mod.SamplerConfig) -> List[dict]:
    out = []
    for clip, records in dataset:
        for inst in sampling_mod.discover_pufs_instances(clip, config, records):
            out.append(
                {
                    "video_id": inst.video_id,
                    "fps": inst.fps,
                    "provenance": "pufs",
                    "query": {
                        "frame_idx": len(clip) - 1,
                        "crop_frame_idx": inst.seed_frame,
                        "box": inst.seed_box.as_list(),
                    },
                    "response_track": {
                        "start": inst.track.start,
                        "boxes": [b.as_list() for b in inst.track.boxes],
                    },
                }
            )
    return out


def load_pufs_pairs(path, dataset, config: sampling_mod.SamplerConfig) -> List[sampling_mod.TrainingPair]:
    """Expand serialized P-UFS instance records back into training pairs."""
    records = json.loads(Path(path).read_text())
    clips = {clip.video_id: clip for clip, _ in dataset}
    pairs: List[sampling_mod.TrainingPair] = []
    for rec in records:
        clip = clips.get(rec["video_id"])
        if clip is None:
            raise DatasetError(f"pufs record references unknown video {rec['video_id']!r}")
        track = ResponseTrack(
            rec["response_track"]["start"],
            tuple(Box(*b) for b in rec["response_track"]["boxes"]),
        )
        inst = sampling_mod.PufsInstance(
            rec["video_id"],
            rec["fps"],
            rec["query"]["crop_frame_idx"],
            Box(*rec["query"]["box"]),
            track,
        )
        rng = np.random.default_rng(
            sampling_mod._stable_seed(config.seed, f"pufs:{clip.video_id}")
        )
        pairs.extend(sampling_mod.expand_pufs_pairs(clip, [inst], config, rng))
    return pairs


@main.command("pufs")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--set", "overrides", multiple=True)
@click.option("--seed", type=int, default=None)
def cmd_pufs(dataset_dir, out_path, config_path, overrides, seed):
    """Discover and track unlabeled objects; write pseudo-pair records."""
    try:
        raw = _apply_overrides(_load_config_file(config_path), overrides)
        if seed is not None:
            raw["seed"] = seed
        config = _from_dict(sampling_mod.SamplerConfig, raw)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    try:
        dataset = load_dataset(dataset_dir)
    except DatasetError as e:
        _fail(EXIT_DATA, str(e))
    records = _pufs_records(dataset, config)
    out = Path(out_path) if out_path else Path(dataset_dir) / "pufs_pairs.json"
    _write_json(out, records)
    click.echo(f"wrote {len(records)} pufs instance records to {out}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@main.command("train")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--set", "overrides", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--pufs-file", type=click.Path(exists=True), default=None)
@click.option("--overwrite", is_flag=True)
def cmd_train(dataset_dir, out_dir, config_path, overrides, seed, pufs_file, overwrite):
    """Train a head on the dataset; write checkpoint and config echo."""
    try:
        raw = _apply_overrides(_load_config_file(config_path), overrides)
        if seed is not None:
            raw["seed"] = seed
        config = _from_dict(train_mod.TrainConfig, raw)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    out = Path(out_dir)
    ckpt_path = out / "checkpoint.zip"
    if ckpt_path.exists() and not overwrite:
        _fail(EXIT_DATA, f"{ckpt_path} exists; pass --overwrite to retrain")
    try:
        dataset = load_dataset(dataset_dir)
    except DatasetError as e:
        _fail(EXIT_DATA, str(e))
    pufs_pairs = None
    if pufs_file is not None:
        pufs_pairs = load_pufs_pairs(pufs_file, dataset, config.sampler)
    try:
        result = train_mod.fit(dataset, config, pufs_pairs=pufs_pairs)
    except train_mod.TrainingDiverged as e:
        _fail(EXIT_NUMERIC, str(e))
    out.mkdir(parents=True, exist_ok=True)
    train_mod.save_checkpoint(
        ckpt_path, result.head, result.extractor, step=result.steps, train_config=config
    )
    _write_json(
        out / "resolved_config.json",
        {"config": asdict(config), "dataset_hash": _dataset_hash(Path(dataset_dir))},
    )
    _write_json(out / "loss_history.json", result.loss_history)
    click.echo(f"trained {config.head.variant} for {result.steps} steps -> {ckpt_path}")


# ---------------------------------------------------------------------------
# predict / detect
# ---------------------------------------------------------------------------


def _scorers_for(dataset, checkpoint, oracle: bool):
    if oracle:
        return lambda record: OracleScorer(record)
    head, extractor, _ = train_mod.load_checkpoint(checkpoint)
    scorer = HeadScorer(head, extractor)
    return lambda record: scorer


@main.command("predict")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--oracle", is_flag=True, help="score with the GT-IoU oracle instead")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--stride", type=int, default=None)
@click.option("--peak-threshold", type=float, default=PeakConfig.threshold)
@click.option("--peak-window", type=int, default=PeakConfig.window)
def cmd_predict(dataset_dir, checkpoint, oracle, out_path, stride, peak_threshold, peak_window):
    """Run the full localization pipeline; write per-query predictions."""
    if not oracle and checkpoint is None:
        _fail(EXIT_CONFIG, "either --checkpoint or --oracle is required")
    try:
        dataset = load_dataset(dataset_dir)
    except DatasetError as e:
        _fail(EXIT_DATA, str(e))
    peak_cfg = PeakConfig(window=peak_window, threshold=peak_threshold, stride=stride)
    tracker_cfg = TrackerConfig()
    make_scorer = _scorers_for(dataset, checkpoint, oracle)
    out_records = []
    for clip, records in dataset:
        for qi, record in enumerate(records):
            result = localize_mod.vq2d_pipeline(
                clip, record.query, make_scorer(record), peak_cfg, tracker_cfg
            )
            out_records.append(
                {
                    "video_id": clip.video_id,
                    "query_index": qi,
                    "response_track": {
                        "start": result.track.start,
                        "boxes": [b.as_list() for b in result.track.boxes],
                    },
                    "peak": {"frame": result.peak_frame, "confidence": result.peak_confidence},
                    "timeline": [[t, d.confidence] for t, d in result.timeline.entries],
                }
            )
    _write_json(Path(out_path), out_records)
    click.echo(f"wrote {len(out_records)} predictions to {out_path}")


@main.command("detect")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--oracle", is_flag=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_detect(dataset_dir, checkpoint, oracle, out_path):
    """Score annotated positive frames; write ranked per-frame detections."""
    if not oracle and checkpoint is None:
        _fail(EXIT_CONFIG, "either --checkpoint or --oracle is required")
    try:
        dataset = load_dataset(dataset_dir)
    except DatasetError as e:
        _fail(EXIT_DATA, str(e))
    make_scorer = _scorers_for(dataset, checkpoint, oracle)
    out_records = []
    for clip, records in dataset:
        for qi, record in enumerate(records):
            scorer = make_scorer(record)
            frames = []
            for t in range(record.gt_track.start, record.gt_track.end):
                dets = scorer.score_frame(clip.frames[t], record.query)
                frames.append(
                    {
                        "frame_idx": t,
                        "detections": [d.box.as_list() + [d.confidence] for d in dets],
                    }
                )
            out_records.append(
                {"video_id": clip.video_id, "query_index": qi, "frames": frames}
            )
    _write_json(Path(out_path), out_records)
    click.echo(f"wrote detections for {len(out_records)} queries to {out_path}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _load_gt(dataset_dir):
    dataset = load_dataset(dataset_dir)
    gt = {}
    for clip, records in dataset:
        for qi, record in enumerate(records):
            gt[(clip.video_id, qi)] = record
    return gt


@main.command("eval-det")
@click.option("--detections", "det_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
def cmd_eval_det(det_path, dataset_dir, out_path):
    """Detection AP/AR over annotated positive frames."""
    try:
        gt = _load_gt(dataset_dir)
    except DatasetError as e:
        _fail(EXIT_DATA, str(e))
    det_records = json.loads(Path(det_path).read_text())
    frames = []
    for rec in det_records:
        key = (rec["video_id"], rec["query_index"])
        if key not in gt:
            _fail(EXIT_DATA, f"detections reference unknown query {key}")
        record = gt[key]
        for fr in rec["frames"]:
            gt_box = record.gt_track.box_at(fr["frame_idx"])
            if gt_box is None:
                _fail(EXIT_DATA, f"frame {fr['frame_idx']} of {key} is not annotated")
            dets = [Detection(Box(*d[:4]), min(max(d[4], 0.0), 1.0)) for d in fr["detections"]]
            frames.append((dets, gt_box))
    try:
        result = metrics_mod.detection_ap(frames)
    except ValueError as e:
        _fail(EXIT_DATA, str(e))
    payload = {
        "AP": result.ap,
        "AP50": result.ap50,
        "AP75": result.ap75,
        "AR@10": result.ar10,
        "config_echo": {"detections": str(det_path), "dataset": str(dataset_dir)},
        "dataset_hash": _dataset_hash(Path(dataset_dir)),
    }
    if out_path:
        _write_json(Path(out_path), payload)
    click.echo(json.dumps({k: payload[k] for k in ("AP", "AP50", "AP75", "AR@10")}, indent=1))


def _parse_predictions(pred_path) -> Dict[Tuple[str, int], dict]:
    records = json.loads(Path(pred_path).read_text())
    return {(r["video_id"], r["query_index"]): r for r in records}


@main.command("eval-vq2d")
@click.option("--predictions", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
def cmd_eval_vq2d(pred_path, dataset_dir, out_path):
    """Track-level VQ2D metrics from a prediction file."""
    try:
        gt = _load_gt(dataset_dir)
    except DatasetError as e:
        _fail(EXIT_DATA, str(e))
    preds = _parse_predictions(pred_path)
    unknown = set(preds) - set(gt)
    if unknown:
        _fail(EXIT_DATA, f"predictions reference unknown queries: {sorted(unknown)}")
    entries = []
    for key, record in sorted(gt.items()):
        rec = preds.get(key)
        if rec is None:
            entries.append((None, record.gt_track))
            continue
        track = ResponseTrack(
            rec["response_track"]["start"],
            tuple(Box(*b) for b in rec["response_track"]["boxes"]),
        )
        entries.append(((track, float(rec["peak"]["confidence"])), record.gt_track))
    result = metrics_mod.vq2d_metrics(entries)
    payload = {
        "tAP25": result.tap25,
        "stAP25": result.stap25,
        "rec%": result.rec_percent,
        "Succ": result.succ,
        "config_echo": {"predictions": str(pred_path), "dataset": str(dataset_dir)},
        "dataset_hash": _dataset_hash(Path(dataset_dir)),
    }
    if out_path:
        _write_json(Path(out_path), payload)
    click.echo(json.dumps({k: payload[k] for k in ("tAP25", "stAP25", "rec%", "Succ")}, indent=1))


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------


@main.command("plot-timeline")
@click.option("--predictions", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--video-id", required=True)
@click.option("--query-index", type=int, default=0)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_plot_timeline(pred_path, dataset_dir, video_id, query_index, out_path):
    """Render one query's confidence timeline with the GT span marked."""
    try:
        gt = _load_gt(dataset_dir)
    except DatasetError as e:
        _fail(EXIT_DATA, str(e))
    preds = _parse_predictions(pred_path)
    key = (video_id, query_index)
    if key not in preds or key not in gt:
        _fail(EXIT_DATA, f"query {key} missing from predictions or dataset")
    rec = preds[key]
    record = gt[key]
    timeline = rec["timeline"]

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(
        "frame,score\n" + "".join(f"{t},{s!r}\n" for t, s in timeline)
    )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    gt_span = (record.gt_track.start, record.gt_track.last_frame)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot([t for t, _ in timeline], [s for _, s in timeline], marker="o", lw=1)
    ax.axvspan(gt_span[0], gt_span[1], color="tab:green", alpha=0.25, label="GT track")
    ax.axvline(rec["peak"]["frame"], color="tab:red", ls="--", label="peak")
    ax.set_xlabel("frame")
    ax.set_ylabel("top-1 confidence")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)

    _write_json(
        out.with_suffix(".meta.json"),
        {
            "video_id": video_id,
            "query_index": query_index,
            "gt_span": [gt_span[0], gt_span[1]],
            "peak_frame": rec["peak"]["frame"],
            "num_points": len(timeline),
        },
    )
    click.echo(f"wrote {out}, {csv_path}, {out.with_suffix('.meta.json')}")


# ---------------------------------------------------------------------------
# ablation recipe
# ---------------------------------------------------------------------------


@main.command("ablation")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int, default=600)
@click.option("--seed", type=int, default=0)
@click.option("--variants", default=",".join(VARIANTS))
@click.option("--stride", type=int, default=1)
def cmd_ablation(dataset_dir, out_dir, steps, seed, variants, stride):
    """Train every head variant and the sampler on/off grid; emit one table."""
    try:
        dataset = load_dataset(dataset_dir)
    except DatasetError as e:
        _fail(EXIT_DATA, str(e))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    runs = []
    for variant in variants.split(","):
        runs.append((variant, True, True))
    for nufs, bps in ((False, False), (True, False), (False, True), (True, True)):
        runs.append(("coco_cond", nufs, bps))
    for variant, nufs, bps in runs:
        config = train_mod.TrainConfig(
            head=HeadConfig(variant=variant),
            sampler=sampling_mod.SamplerConfig(
                nufs_enabled=nufs,
                bps_positive_prob=0.5 if bps else 1.0,
                seed=seed,
            ),
            total_steps=steps,
            seed=seed,
        )
        try:
            result = train_mod.fit(dataset, config)
        except train_mod.TrainingDiverged as e:
            _fail(EXIT_NUMERIC, str(e))
        scorer = HeadScorer(result.head, result.extractor)
        entries = []
        timelines = []
        peak_cfg = PeakConfig(stride=stride)
        for clip, records in dataset:
            for record in records:
                res = localize_mod.vq2d_pipeline(clip, record.query, scorer, peak_cfg)
                entries.append(((res.track, res.peak_confidence), record.gt_track))
                timelines.append((res.timeline, record))
        vq = metrics_mod.vq2d_metrics(entries)
        fp = metrics_mod.fp_rate_on_negatives(timelines, tau=0.6)
        rows.append(
            {
                "variant": variant,
                "nufs": nufs,
                "bps": bps,
                "tAP25": round(vq.tap25, 4),
                "stAP25": round(vq.stap25, 4),
                "rec%": round(vq.rec_percent, 2),
                "Succ": round(vq.succ, 2),
                "fp_rate@0.6": round(fp, 4),
            }
        )
        click.echo(json.dumps(rows[-1]))
    _write_json(out / "ablation.json", rows)
    header = list(rows[0].keys())
    csv = ",".join(header) + "\n" + "".join(
        ",".join(str(r[h]) for h in header) + "\n" for r in rows
    )
    (out / "ablation.csv").write_text(csv)
    click.echo(f"wrote {out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
