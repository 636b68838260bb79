"""Command-line entry point: ``scenvad {gen-data,train,adapt-score,eval}``.

Every option may also come from a JSON ``--config`` file whose keys are the
option names (dashes or underscores). A flag given on the command line wins
over the file, which wins over the built-in default. Each command writes the
resolved settings to ``resolved_config.json`` in its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import DatasetSplit, SplitSpec, ensure_dir, frame_labels, load_frames, load_manifest, protocol_split
from .errors import ScenVADError, VideoTooShort
from .evaluation import grouped_report, labeled_from_scores, write_report_csv, write_report_json
from .meta import (
    FrameStore,
    MetaConfig,
    adapt_to_target,
    adaptation_boundary,
    meta_train,
    save_meta_config,
    write_training_log,
)
from .predictor import LossWeights, PredictorConfig, load_checkpoint, save_checkpoint
from .scoring import DEFAULT_THRESHOLD, read_scores, score_video, write_scores
from .synthetic import DatasetSpec, generate_dataset

log = logging.getLogger("scenvad")

RESOLVED_CONFIG = "resolved_config.json"

DEFAULTS = {
    "gen-data": {"spec": None, "out": None, "seed": None},
    "train": {
        "data": None, "out": None, "seed": 0, "split": None,
        "n_way": 7, "k_shot": 10, "val_size": None, "epochs": 1500,
        "inner_lr": MetaConfig.inner_lr, "outer_lr": MetaConfig.outer_lr, "inner_steps": 1,
        "meta_batch": None, "sampler": "scenario", "second_order": False,
        "optimizer": MetaConfig.outer_optimizer, "window": 5,
        "base_channels": 8, "depth": 2, "recurrent": False,
        "w_l1": 1.0, "w_msssim": 1.0, "w_gdl": 1.0, "msssim_scales": None,
        "dry_run": False,
    },
    "adapt-score": {
        "checkpoint": None, "data": None, "split": None, "out": None, "seed": 0,
        "no_adapt": False, "inner_lr": None, "inner_steps": None, "k_shot": None,
        "threshold": DEFAULT_THRESHOLD, "curves": False, "pad": False, "skip_adaptation_frames": False,
    },
    "eval": {
        "scores": None, "data": None, "split": None, "out": None, "seed": 0,
        "polarity": "normalcy", "group_by": "anomaly_type", "threshold": DEFAULT_THRESHOLD,
    },
}
REQUIRED = {
    "gen-data": ("spec", "out"),
    "train": ("data", "out"),
    "adapt-score": ("checkpoint", "data", "out"),
    "eval": ("scores", "data", "out"),
}


class UsageError(Exception):
    pass


def _flag(parser, name, **kw):
    # default None marks "not given" so the config file can fill it in
    parser.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)


def _switch(parser, name, help=None):
    parser.add_argument("--" + name.replace("_", "-"), dest=name, action="store_const", const=True,
                        default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenvad", description="Scenario-adaptive video anomaly detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic multi-scenario dataset")
    _flag(g, "spec", help="dataset spec JSON")
    _flag(g, "out", help="output directory")
    _flag(g, "seed", type=int, help="overrides the seed in --spec")
    _flag(g, "config")

    t = sub.add_parser("train", help="meta-train a frame predictor")
    _flag(t, "data", help="manifest file or dataset directory")
    _flag(t, "out")
    _flag(t, "seed", type=int)
    _flag(t, "config")
    _flag(t, "split", help="existing split JSON; default is a fresh protocol_i split")
    _flag(t, "n_way", type=int)
    _flag(t, "k_shot", type=int)
    _flag(t, "val_size", type=int)
    _flag(t, "epochs", type=int)
    _flag(t, "inner_lr", type=float)
    _flag(t, "outer_lr", type=float)
    _flag(t, "inner_steps", type=int)
    _flag(t, "meta_batch", type=int, help="tasks per outer step (default n_way)")
    _flag(t, "sampler", choices=("scenario", "view"))
    _switch(t, "second_order")
    _flag(t, "optimizer", choices=("sgd", "adam"))
    _flag(t, "window", type=int, help="temporal block length T'")
    _flag(t, "base_channels", type=int)
    _flag(t, "depth", type=int)
    _switch(t, "recurrent", help="ConvGRU bottleneck")
    _flag(t, "w_l1", type=float)
    _flag(t, "w_msssim", type=float)
    _flag(t, "w_gdl", type=float)
    _flag(t, "msssim_scales", type=int)
    _switch(t, "dry_run", help="write the resolved config and exit")

    a = sub.add_parser("adapt-score", help="adapt to each test video and write frame scores")
    _flag(a, "checkpoint")
    _flag(a, "data")
    _flag(a, "split", help="split JSON; test videos are scored (default: split.json beside the checkpoint)")
    _flag(a, "out")
    _flag(a, "seed", type=int)
    _flag(a, "config")
    _switch(a, "no_adapt", help="score with the meta-trained weights as-is")
    _flag(a, "inner_lr", type=float)
    _flag(a, "inner_steps", type=int)
    _flag(a, "k_shot", type=int)
    _flag(a, "threshold", type=float)
    _switch(a, "curves", help="per-video score plots and CSVs")
    _switch(a, "pad", help="write every frame, unscored ones as 1.0")
    _switch(a, "skip_adaptation_frames", help="score only frames after the adaptation prefix")

    e = sub.add_parser("eval", help="frame-level metrics from a score CSV")
    _flag(e, "scores")
    _flag(e, "data")
    _flag(e, "split", help="restrict to the split's test videos")
    _flag(e, "out")
    _flag(e, "seed", type=int)
    _flag(e, "config")
    _flag(e, "polarity", choices=("normalcy", "anomaly"))
    _flag(e, "group_by", choices=("anomaly_type", "scenario", "none"))
    _flag(e, "threshold", type=float)
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags."""
    settings = dict(DEFAULTS[command])
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key not in settings:
                raise UsageError(f"unknown config key {key!r} for {command}")
            settings[key] = value
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    missing = [k for k in REQUIRED[command] if settings[k] is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return settings


def _write_resolved(out: Path, command: str, settings: dict, **extra) -> None:
    snapshot = {"command": command, **settings, **extra}
    (out / RESOLVED_CONFIG).write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(s: dict) -> int:
    spec = DatasetSpec.load(s["spec"])
    if s["seed"] is not None:
        spec = replace(spec, seed=int(s["seed"]))
    out = ensure_dir(s["out"])
    manifest = generate_dataset(spec, out)
    _write_resolved(out, "gen-data", s, dataset_spec=spec.to_json())
    print(out / "manifest.json")
    log.info("%d videos in %d scenarios", len(manifest), len(manifest.scenario_index))
    return 0


def _meta_config(s: dict) -> MetaConfig:
    loss = LossWeights(w_l1=s["w_l1"], w_msssim=s["w_msssim"], w_gdl=s["w_gdl"], msssim_scales=s["msssim_scales"])
    return MetaConfig(
        n_way=s["n_way"], k_shot=s["k_shot"], val_size=s["val_size"], inner_lr=s["inner_lr"],
        inner_steps=s["inner_steps"], outer_lr=s["outer_lr"], meta_batch_tasks=s["meta_batch"],
        epochs=s["epochs"], sampler_mode=s["sampler"], second_order=bool(s["second_order"]),
        seed=s["seed"], window=s["window"], outer_optimizer=s["optimizer"], loss=loss,
    )


def cmd_train(s: dict) -> int:
    config = _meta_config(s)
    out = ensure_dir(s["out"])
    manifest = load_manifest(s["data"])
    split = SplitSpec.load(s["split"]) if s["split"] else protocol_split(manifest, "protocol_i", s["seed"])
    first = next(iter(manifest))
    frame_size = load_frames(first).shape[1:3]
    pconfig = PredictorConfig(frame_size=tuple(frame_size), input_frames=config.window - 1,
                              base_channels=s["base_channels"], depth=s["depth"],
                              recurrent_bottleneck=bool(s["recurrent"]))
    _write_resolved(out, "train", s, meta_config=config.to_json(), predictor_config=pconfig.to_json())
    split.save(out / "split.json")
    print(f"N={config.n_way} K={config.k_shot} epochs={config.epochs} sampler={config.sampler_mode}")
    if s["dry_run"]:
        return 0

    def progress(it, loss):
        if it % 50 == 0 or it == config.epochs - 1:
            log.info("iteration %d/%d meta_loss %.5f", it + 1, config.epochs, loss)

    model, history = meta_train(manifest, split, config, init_seed=s["seed"], predictor_config=pconfig,
                                store=FrameStore(), progress=progress)
    save_checkpoint(model, out / "checkpoint.bin", extra={"meta_config": config.to_json()})
    write_training_log(history, out / "training_log.csv")
    save_meta_config(config, out / "meta_config.json")
    print(out / "checkpoint.bin")
    return 0


def _plot_curve(series, labels, path: Path, threshold: float) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    idx = series.frame_indices
    fig, ax = plt.subplots(figsize=(6, 2.5))
    y = np.asarray(labels)
    t = 0
    while t < len(y):
        if y[t]:
            start = t
            while t < len(y) and y[t]:
                t += 1
            ax.axvspan(start + 0.5, t + 0.5, color="tab:red", alpha=0.2, lw=0)
        t += 1
    ax.plot(idx, series.scores, color="tab:blue", lw=1.2)
    ax.axhline(threshold, color="grey", ls="--", lw=0.8)
    ax.set_xlim(1, len(y))
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("frame")
    ax.set_ylabel("normalized score")
    ax.set_title(series.video_id, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _default_split(checkpoint: Path) -> Path | None:
    candidate = checkpoint.parent / "split.json"
    return candidate if candidate.exists() else None


def cmd_adapt_score(s: dict) -> int:
    checkpoint = Path(s["checkpoint"])
    model, extra = load_checkpoint(checkpoint)
    config = MetaConfig.from_json(extra["meta_config"]) if "meta_config" in extra else MetaConfig(
        window=model.config.window)
    for key in ("inner_lr", "inner_steps", "k_shot"):
        if s[key] is not None:
            config = replace(config, **{key: s[key]})
    if s["no_adapt"]:
        config = replace(config, inner_lr=0.0)
    manifest = load_manifest(s["data"])
    split_path = s["split"] or _default_split(checkpoint)
    records = list(manifest)
    if split_path is not None:
        split = SplitSpec.load(split_path)
        records = [r for r in records if r.video_id in split.test_ids]
    out = ensure_dir(s["out"])
    _write_resolved(out, "adapt-score", {**s, "split": str(split_path) if split_path else None},
                    meta_config=config.to_json())

    boundary = adaptation_boundary(config.k_shot, config.window)
    first_frame = boundary + 1 if s["skip_adaptation_frames"] else config.window
    curves = ensure_dir(out / "curves") if s["curves"] else None
    all_series, failed = [], []
    for record in records:
        try:
            frames = load_frames(record)
            adapted = model if s["no_adapt"] else adapt_to_target(model, record, config, frames)
            series = score_video(adapted, record, config.window, frames, first_frame=first_frame,
                                 threshold=s["threshold"])
        except VideoTooShort as e:
            print(f"skipped {record.video_id}: {e}", file=sys.stderr)
            failed.append(record.video_id)
            continue
        all_series.append(series)
        if curves is not None:
            labels = frame_labels(record)
            _plot_curve(series, labels, curves / f"{record.video_id}.png", s["threshold"])
            write_scores([series], curves / f"{record.video_id}.csv")
    pad_to = {r.video_id: r.frame_count for r in records} if s["pad"] else None
    write_scores(all_series, out / "scores.csv", pad_to=pad_to)
    print(out / "scores.csv")
    if failed:
        print(f"{len(failed)} of {len(records)} videos were too short to score", file=sys.stderr)
        return 1
    return 0


def cmd_eval(s: dict) -> int:
    manifest = load_manifest(s["data"])
    scores = read_scores(s["scores"])
    if s["split"]:
        view = DatasetSplit(manifest, SplitSpec.load(s["split"]))
        scores = {k: v for k, v in scores.items() if k in view.split.test_ids}
        labels = {k: view.frame_labels(k) for k in scores}
    else:
        labels = {k: frame_labels(manifest.get(k)) for k in scores if k in manifest}
    data = labeled_from_scores(scores, labels, s["polarity"])
    group_by = None if s["group_by"] == "none" else s["group_by"]
    report = grouped_report(data, manifest, group_by, s["threshold"])
    out = ensure_dir(s["out"])
    _write_resolved(out, "eval", s)
    write_report_csv(report, out / "report.csv")
    write_report_json(report, out / "report.json")
    print((out / "report.csv").read_text(), end="")
    if report.overall["auc"] is None:
        print(f"Overall is unevaluable: {report.overall['status']}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "adapt-score": cmd_adapt_score, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        settings = resolve(args.command, args)
    except UsageError as e:
        parser.error(str(e))
    try:
        return COMMANDS[args.command](settings)
    except (ScenVADError, OSError, KeyError, ValueError) as e:
        print(f"scenvad {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
