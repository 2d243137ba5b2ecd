"""Command-line surface: encode, decode, train, eval, synth, ablate.

Training runs are described by a plain-text config file of ``key = value``
lines (``#`` starts a comment).  Recognized keys:

  model:    width, groups, variant, metric, lambda_index, gop, use_context
  schedule: steps, batch_size, clip_len, crop, lr, lr_final, decay_at,
            seed, log_every, grad_clip, intra_steps
  paths:    data (clip directory), out (checkpoint), log (JSONL), init
            (checkpoint to start from)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch
from PIL import Image

from . import report
from .pipeline import CodecConfig, decode_video, encode_video
from .training import (
    TrainConfig,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    pretrain_inter,
    save_checkpoint,
    train_end_to_end,
    train_intra,
)
from .training.data import default_dataset_spec, load_clip_frames


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _as_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


_CODEC_KEYS = {
    "width": int,
    "groups": int,
    "gop": int,
    "metric": str,
    "lambda_index": int,
    "variant": str,
    "use_context": _as_bool,
}
_TRAIN_KEYS = {
    "steps": int,
    "batch_size": int,
    "clip_len": int,
    "crop": int,
    "lr": float,
    "lr_final": float,
    "decay_at": float,
    "seed": int,
    "log_every": int,
    "grad_clip": float,
}
_PATH_KEYS = {"data", "out", "log", "init"}


def build_configs(values: dict[str, str]) -> tuple[CodecConfig, TrainConfig, dict]:
    """Split a parsed config into codec, schedule, and path settings."""
    codec_kwargs = {}
    train_kwargs = {}
    misc: dict = {"intra_steps": 0}
    for key, value in values.items():
        if key in _CODEC_KEYS:
            field = "gop_length" if key == "gop" else key
            codec_kwargs[field] = _CODEC_KEYS[key](value)
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _TRAIN_KEYS[key](value)
        elif key == "intra_steps":
            misc["intra_steps"] = int(value)
        elif key in _PATH_KEYS:
            misc[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return CodecConfig(**codec_kwargs), TrainConfig(**train_kwargs), misc


def _save_frames_dir(frames: torch.Tensor, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    as_bytes = (frames.clamp(0, 1) * 255).round().to(torch.uint8)
    for i, frame in enumerate(as_bytes):
        Image.fromarray(frame.permute(1, 2, 0).numpy()).save(
            out_dir / f"frame_{i:04d}.png"
        )


def cmd_encode(args: argparse.Namespace) -> int:
    model, config, _ = load_checkpoint(args.model)
    if args.gop is not None:
        config = dataclasses.replace(config, gop_length=args.gop)
    frames = load_clip_frames(Path(args.input))
    with torch.no_grad():
        data, _ = encode_video(model, frames, config)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    t, _, h, w = frames.shape
    bpp = len(data) * 8 / (t * h * w)
    print(f"encoded {t} frames to {out} ({len(data)} bytes, {bpp:.4f} bpp)")
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    model, _, _ = load_checkpoint(args.model)
    data = Path(args.input).read_bytes()
    with torch.no_grad():
        frames, header = decode_video(model, data)
    _save_frames_dir(frames, Path(args.output))
    print(
        f"decoded {frames.shape[0]} frames ({header.width}x{header.height}) "
        f"to {args.output}"
    )
    return 0


def _staged_training(
    model, clips, codec_config: CodecConfig, train_config: TrainConfig,
    stage: str, misc: dict,
) -> dict:
    log = Path(misc["log"]) if "log" in misc else None
    if stage == "pretrain":
        if misc["intra_steps"] > 0:
            intra_config = dataclasses.replace(
                train_config, steps=misc["intra_steps"], clip_len=1
            )
            train_intra(model, clips, codec_config, intra_config, log_path=None)
        return pretrain_inter(model, clips, codec_config, train_config, log)
    return train_end_to_end(model, clips, codec_config, train_config, log)


def cmd_train(args: argparse.Namespace) -> int:
    values = parse_config_text(Path(args.config).read_text())
    codec_config, train_config, misc = build_configs(values)
    if args.metric is not None:
        codec_config = dataclasses.replace(codec_config, metric=args.metric)
    if "data" not in misc:
        raise SystemExit("config must set 'data' to a clip directory")
    clips = load_dataset(Path(misc["data"]))
    if "init" in misc:
        model, codec_config, _ = load_checkpoint(misc["init"])
    else:
        model = codec_config.build_model()
    logs = _staged_training(
        model, clips, codec_config, train_config, args.stage, misc
    )
    out = misc.get("out", "checkpoint.pt")
    save_checkpoint(Path(out), model, codec_config, extra={"last_logs": logs})
    print(
        f"{args.stage} finished at step {logs['step']} "
        f"(loss {logs['loss']:.4f}); checkpoint: {out}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    anchor = report.read_rd_csv(Path(args.anchor))
    test = report.read_rd_csv(Path(args.test))
    result = report.run_eval(
        anchor, test, Path(args.out), quality_field=args.quality
    )
    print(
        f"BD-rate {result['bd_rate_percent']:+.2f}% "
        f"BD-{args.quality} {result['bd_quality']:+.4f} "
        f"(table: {result['table']}, plot: {result['figure']})"
    )
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if args.spec is not None:
        spec = json.loads(Path(args.spec).read_text())
    else:
        spec = default_dataset_spec()
    paths = generate_synthetic(spec, Path(args.out))
    print(f"wrote {len(paths)} clips under {args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    values = parse_config_text(Path(args.config).read_text())
    codec_config, train_config, misc = build_configs(values)
    codec_config = dataclasses.replace(codec_config, variant=args.variant)
    if "data" not in misc:
        raise SystemExit("config must set 'data' to a clip directory")
    clips = load_dataset(Path(misc["data"]))
    model = codec_config.build_model()
    for stage in ("pretrain", "e2e"):
        _staged_training(model, clips, codec_config, train_config, stage, misc)
    out_dir = Path(args.out)
    ckpt = out_dir / f"{args.variant}.pt"
    save_checkpoint(ckpt, model, codec_config)
    row = report.evaluate_model(model, clips, codec_config, label=args.variant)
    report.write_rd_csv(out_dir / f"{args.variant}.csv", [row])
    print(
        f"{args.variant}: {row['bpp']:.4f} bpp, {row['psnr']:.2f} dB, "
        f"ms-ssim {row['msssim']:.4f} (checkpoint: {ckpt})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cstrcodec",
        description="Learned low-delay video codec with recurrent temporal "
        "aggregation and hybrid motion compensation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode a directory of frames")
    p.add_argument("--input", required=True, help="directory of frame_*.png")
    p.add_argument("--output", required=True, help="output stream file")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--gop", type=int, default=None, help="intra period")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a stream to frames")
    p.add_argument("--input", required=True, help="stream file")
    p.add_argument("--output", required=True, help="output frame directory")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=("pretrain", "e2e"))
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--metric", choices=("psnr", "msssim"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="BD comparison of two RD tables")
    p.add_argument("--anchor", required=True, help="anchor RD csv")
    p.add_argument("--test", required=True, help="test RD csv")
    p.add_argument("--out", default="eval_report", help="report directory")
    p.add_argument("--quality", default="psnr", help="quality column to use")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic clips")
    p.add_argument("--spec", default=None, help="JSON clip spec file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train and score one model variant")
    p.add_argument(
        "--variant", required=True,
        choices=("vector-only", "kernel-only", "no-attention", "no-texture",
                 "convlstm", "full"),
    )
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", default="ablation", help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
