"""Command-line entry point: dataset generation, training, evaluation,
per-video prediction, and report plotting.

Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audloc",
        description="Frame-level localization of audible (collision) actions in silent video.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic bouncing-ball dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-videos", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=["bounce", "multi", "gravity"], default="bounce")
    p.add_argument("--write-flow", action="store_true", help="also write analytic flow files")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val", help="optional validation dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--toy", action="store_true", help="apply the desk-scale profile")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config field (repeatable)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics report JSON output path")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--match-window", type=int, help="event matching tolerance in frames")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("predict", help="run inference on a single frame directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="directory of frame_%%06d.png files")
    p.add_argument("--out", required=True, help="prediction JSON output path")
    p.add_argument("--emit-maps", help="directory for per-frame discriminative maps")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("plot", help="render probability strips from a report")
    p.add_argument("--report", required=True, help="prediction/metrics report JSON")
    p.add_argument("--out", required=True, help="output image path")
    return parser


def _apply_overrides(config, pairs):
    from dataclasses import fields, replace

    from .data import DatasetError

    types = {f.name: f.type for f in fields(type(config))}
    casts = {"float": float, "int": int, "str": str}
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise DatasetError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        key = key.strip()
        if key not in types:
            raise DatasetError(f"unknown config key {key!r}")
        values[key] = casts[types[key]](value.strip())
    return replace(config, **values)


def _load_train_config(args):
    from .training import TrainConfig, load_config, toy_overrides

    config = TrainConfig()
    if args.config:
        config = load_config(args.config, config)
    if getattr(args, "toy", False):
        config = toy_overrides(config)
    config = _apply_overrides(config, args.set)
    if getattr(args, "match_window", None) is not None:
        from dataclasses import replace

        config = replace(config, match_window=args.match_window)
    return config


def _cmd_synth_gen(args) -> int:
    from .data import DatasetError
    from .synth import export_dataset, preset_spec

    if os.path.exists(args.out) and not os.path.isdir(args.out):
        raise DatasetError(f"--out {args.out} exists and is not a directory")
    specs = [preset_spec(args.preset, args.seed + i) for i in range(args.num_videos)]
    ids = export_dataset(specs, args.out, write_flow=args.write_flow)
    print(f"wrote {len(ids)} videos to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .training import load_dataset, train

    config = _load_train_config(args)
    records = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None

    def log(step, parts):
        if step % 50 == 0:
            print(
                f"step {step}: total={parts['total']:.4f} action={parts['action']:.4f} "
                f"cont={parts['contrastive']:.4f} temp={parts['temporal']:.4f}"
            )

    result = train(config, records, val_records=val, out_path=args.out, log_fn=log)
    if result.best_validation:
        print(f"best validation F1 {result.best_validation['f1']:.3f} "
              f"at step {result.best_validation['step']}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .data import write_atomic
    from .training import evaluate_checkpoint, load_dataset

    config = _load_train_config(args)
    records = load_dataset(args.data)
    report = evaluate_checkpoint(args.checkpoint, records, config)
    write_atomic(args.out, report.to_json().encode("utf-8"))
    print(
        f"recall={report.recall:.3f} precision={report.precision:.3f} f1={report.f1:.3f} "
        f"nme={report.nme:.3f} pme={report.pme if report.pme is None else round(report.pme, 3)} "
        f"mae={report.mae:.3f} obo={report.obo:.3f}"
    )
    return EXIT_OK


def _cmd_predict(args) -> int:
    import cv2

    from .data import load_video_frames, write_atomic
    from .model import load_checkpoint
    from .training import AnnotationTrack, VideoRecord, predict_video, prepare_video

    config = _load_train_config(args)
    model, payload = load_checkpoint(args.checkpoint)
    video = load_video_frames(args.video, fps=args.fps)
    track = AnnotationTrack(video_id=video.id, labels=np.zeros(video.num_frames, dtype=np.int64))
    record = VideoRecord(video=video, track=track)
    from dataclasses import replace

    config = replace(config, flow_backend="classical", **_checkpoint_arch(payload))
    pv = prepare_video(record, config)
    probs, events, maps = predict_video(model, pv, config)

    doc = {
        "video_id": video.id,
        "num_frames": int(video.num_frames),
        "probs": [[float(a), float(b)] for a, b in probs],
        "events": events,
    }
    write_atomic(args.out, (json.dumps(doc, indent=2) + "\n").encode("utf-8"))

    if args.emit_maps:
        os.makedirs(args.emit_maps, exist_ok=True)
        for t in range(maps.shape[0]):
            m = maps[t]
            lo, hi = float(m.min()), float(m.max())
            scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
            img = np.clip(scaled * 255.0 + 0.5, 0, 255).astype(np.uint8)
            ok, buf = cv2.imencode(".png", img)
            if not ok:
                raise RuntimeError(f"failed to encode map frame {t}")
            write_atomic(os.path.join(args.emit_maps, f"map_{t:06d}.png"), buf.tobytes())
    print(f"wrote {video.num_frames} probability rows and {len(events)} events to {args.out}")
    return EXIT_OK


def _checkpoint_arch(payload) -> dict:
    cfg = payload["model_config"]
    return dict(
        encoder=cfg["encoder"],
        input_size=cfg["input_size"],
        attn_dim=cfg["attn_dim"],
        fusion_channels=cfg["fusion_channels"],
        transformer_layers=cfg["transformer_layers"],
        transformer_heads=cfg["transformer_heads"],
        transformer_width=cfg["transformer_width"],
        clip_len=cfg["max_clip_len"],
    )


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import DatasetError

    try:
        with open(args.report, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"report not found: {args.report}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"report is not valid JSON: {exc}") from exc

    if "per_video" in doc:
        rows = []
        for entry in doc["per_video"]:
            rows.append(
                {
                    "id": entry["id"],
                    "probs": None,
                    "events": entry.get("pred_events", []),
                    "gt": entry.get("gt_events", []),
                }
            )
    elif "probs" in doc:
        rows = [
            {
                "id": doc.get("video_id", "video"),
                "probs": [p[1] for p in doc["probs"]],
                "events": doc.get("events", []),
                "gt": doc.get("gt_events", []),
            }
        ]
    else:
        raise DatasetError(f"report {args.report} has neither per_video nor probs")

    fig, axes = plt.subplots(len(rows), 1, figsize=(8, 1.6 * len(rows)), squeeze=False)
    for ax, row in zip(axes[:, 0], rows):
        if row["probs"] is not None:
            ax.plot(row["probs"], color="tab:blue", lw=1.0, label="p(sound)")
            ax.set_ylim(-0.05, 1.05)
        for g in row["gt"]:
            ax.axvline(g, color="tab:green", alpha=0.6, lw=1.0)
        for e in row["events"]:
            ax.axvline(e, color="tab:red", alpha=0.8, lw=1.0, linestyle="--")
        ax.set_ylabel(row["id"], rotation=0, ha="right", fontsize=7)
        ax.set_yticks([])
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(args.out + ".tmp.png", dpi=120)
    os.replace(args.out + ".tmp.png", args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


_COMMANDS = {
    "synth-gen": _cmd_synth_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "plot": _cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    from .data import DatasetError

    try:
        return _COMMANDS[args.command](args)
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
