"""Rate-distortion evaluation and report emission.

Turns trained models and coded streams into RD rows (label, bpp, PSNR,
MS-SSIM), writes them as CSV tables, compares curves with BD metrics, and
renders RD plots to image files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import torch
from torch import Tensor

from .metrics import BdResult, bd_metrics, ms_ssim, psnr
from .pipeline import CodecConfig, decode_video, encode_video
from .training.data import load_clip_frames

RD_FIELDS = ("label", "bpp", "psnr", "msssim", "msssim_db")


def msssim_db(value: float) -> float:
    """MS-SSIM on a log scale; capped like PSNR for identical inputs."""
    if value >= 1.0 - 1e-10:
        return 100.0
    return -10.0 * math.log10(1.0 - value)


def _clip_metrics(decoded: Tensor, original: Tensor, nbytes: int) -> dict:
    t, _, h, w = original.shape
    frame_psnrs = [psnr(decoded[i], original[i]) for i in range(t)]
    ms = float(ms_ssim(decoded, original))
    return {
        "bpp": nbytes * 8 / (t * h * w),
        "psnr": sum(frame_psnrs) / t,
        "msssim": ms,
        "msssim_db": msssim_db(ms),
    }


def evaluate_model(
    model, clips: list[Tensor], config: CodecConfig, label: str = ""
) -> dict:
    """Encode and decode every clip; average bpp and quality across clips."""
    model.eval()
    rows = []
    with torch.no_grad():
        for clip in clips:
            data, _ = encode_video(model, clip, config)
            decoded, _ = decode_video(model, data)
            rows.append(_clip_metrics(decoded, clip, len(data)))
    return {"label": label, **average_rows(rows)}


def average_rows(rows: list[dict]) -> dict:
    if not rows:
        raise ValueError("nothing to average")
    return {
        field: sum(r[field] for r in rows) / len(rows)
        for field in ("bpp", "psnr", "msssim", "msssim_db")
    }


def evaluate_streams(
    model, pairs: list[tuple[Path, Path]]
) -> list[dict]:
    """Score coded streams on disk against their original frame directories.

    Each pair is (stream file, clip directory).  Returns one row per
    sequence plus an average row per motion class (clips whose ``meta.json``
    names a kind) and an overall average.
    """
    model.eval()
    rows = []
    with torch.no_grad():
        for stream_path, clip_dir in pairs:
            stream_path, clip_dir = Path(stream_path), Path(clip_dir)
            data = stream_path.read_bytes()
            decoded, _ = decode_video(model, data)
            original = load_clip_frames(clip_dir)
            if decoded.shape != original.shape:
                raise ValueError(
                    f"{stream_path.name} decodes to {tuple(decoded.shape)} but "
                    f"{clip_dir.name} holds {tuple(original.shape)}"
                )
            row = _clip_metrics(decoded, original, len(data))
            meta_path = clip_dir / "meta.json"
            kind = "unknown"
            if meta_path.exists():
                kind = json.loads(meta_path.read_text()).get("kind", "unknown")
            rows.append({"label": clip_dir.name, "class": kind, **row})
    by_class: dict[str, list[dict]] = {}
    for row in rows:
        by_class.setdefault(row["class"], []).append(row)
    summary = []
    for kind, members in sorted(by_class.items()):
        summary.append(
            {"label": f"avg:{kind}", "class": kind, **average_rows(members)}
        )
    summary.append({"label": "avg:all", "class": "all", **average_rows(rows)})
    return rows + summary


def write_rd_csv(path: Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def read_rd_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        raw = list(csv.DictReader(fh))
    rows = []
    for record in raw:
        row = {}
        for key, value in record.items():
            try:
                row[key] = float(value)
            except (TypeError, ValueError):
                row[key] = value
        rows.append(row)
    return rows


def rd_points(rows: list[dict], quality_field: str = "psnr") -> list[tuple[float, float]]:
    return [(row["bpp"], row[quality_field]) for row in rows]


def rd_figure(
    curves: dict[str, list[tuple[float, float]]],
    quality_label: str,
    path: Path,
) -> None:
    """Render one RD curve per label to an image file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, points in curves.items():
        pts = sorted(points)
        ax.plot(
            [p[0] for p in pts], [p[1] for p in pts],
            marker="o", linewidth=1.5, label=label,
        )
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel(quality_label)
    ax.grid(True, alpha=0.4)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_eval(
    anchor_rows: list[dict],
    test_rows: list[dict],
    out_dir: Path,
    quality_field: str = "psnr",
) -> dict:
    """BD comparison of two RD tables; writes a summary CSV and an RD plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    anchor_pts = rd_points(anchor_rows, quality_field)
    test_pts = rd_points(test_rows, quality_field)
    bd: BdResult = bd_metrics(anchor_pts, test_pts)
    table_path = out_dir / "bd_summary.csv"
    write_rd_csv(
        table_path,
        [{
            "quality_field": quality_field,
            "bd_rate_percent": bd.bd_rate_percent,
            "bd_quality": bd.bd_quality,
        }],
    )
    figure_path = out_dir / "rd_curve.png"
    rd_figure(
        {"anchor": anchor_pts, "test": test_pts}, quality_field, figure_path
    )
    return {
        "bd_rate_percent": bd.bd_rate_percent,
        "bd_quality": bd.bd_quality,
        "table": table_path,
        "figure": figure_path,
    }
