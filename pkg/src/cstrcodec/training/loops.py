"""Staged training loops: intra warmup, motion pretrain, end to end.

The motion pretrain stage optimizes only the inter-frame machinery (feature
extractors, recurrent aggregation, motion compensation, feature coder) while
the intra and residual codecs stay frozen; a parameter fingerprint taken
before and after the stage guards that contract.  All stages share Adam with
a step learning-rate decay and abort on non-finite losses.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..pipeline import CodecConfig, distortion2, pretrain_inter_loss, total_loss, _bpp
from .data import sample_clips

CHECKPOINT_VERSION = 1

FROZEN_PRETRAIN_PREFIXES = ("intra.", "residual.")


@dataclass
class TrainConfig:
    """Knobs for one training stage.

    ``rate_warmup``/``rate_ramp`` schedule the weight on the rate terms: zero
    before ``rate_warmup`` steps, rising linearly to one at ``rate_ramp``,
    one afterwards.  Freshly initialized feature latents sit below the
    quantization grid, so full rate pressure from step zero can kill the
    feature stream before it learns to carry motion; a short warmup avoids
    that dead-channel equilibrium.  The defaults (0, 0) keep the plain
    objective throughout.
    """

    steps: int = 200
    batch_size: int = 2
    clip_len: int = 3
    crop: int = 64
    lr: float = 1e-4
    lr_final: float = 1e-5
    decay_at: float = 0.7
    seed: int = 0
    log_every: int = 25
    grad_clip: float = 1.0
    rate_warmup: int = 0
    rate_ramp: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0.0 < self.decay_at <= 1.0:
            raise ValueError("decay_at must be a fraction of the run")
        if self.rate_warmup < 0 or self.rate_ramp < 0:
            raise ValueError("rate schedule steps must be nonnegative")


def save_checkpoint(
    path: Path,
    model: torch.nn.Module,
    config: CodecConfig,
    extra: dict | None = None,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path) -> tuple[torch.nn.Module, CodecConfig, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = CodecConfig(**payload["config"])
    model = config.build_model()
    model.load_state_dict(payload["state_dict"])
    return model, config, payload.get("extra", {})


def parameter_fingerprint(model: torch.nn.Module, prefixes: tuple[str, ...]) -> str:
    """SHA-256 over the byte content of parameters under the given prefixes."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if name.startswith(prefixes):
            digest.update(name.encode())
            digest.update(param.detach().numpy().tobytes())
    return digest.hexdigest()


class JsonlLogger:
    """Appends one JSON object per line; None path disables logging."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, record: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def _lr_at(step: int, train_config: TrainConfig) -> float:
    if step >= int(train_config.steps * train_config.decay_at):
        return train_config.lr_final
    return train_config.lr


def _rate_weight_at(step: int, train_config: TrainConfig) -> float:
    """Rate-term weight: 0 until rate_warmup, linear to 1 at rate_ramp."""
    warmup, ramp = train_config.rate_warmup, train_config.rate_ramp
    if step < warmup:
        return 0.0
    if step >= ramp:
        return 1.0
    return (step - warmup) / float(ramp - warmup)


def _run_loop(
    params: list[torch.nn.Parameter],
    loss_fn,
    clips: list[torch.Tensor],
    train_config: TrainConfig,
    log_path: Path | None,
    stage: str,
) -> dict:
    rng = np.random.default_rng(train_config.seed)
    optimizer = torch.optim.Adam(params, lr=train_config.lr)
    logger = JsonlLogger(log_path)
    last_logs: dict = {}
    # Snapshot the trained parameters at every log point so divergence can
    # roll back to the last finite state instead of leaving NaN weights.
    snapshot = [p.detach().clone() for p in params]
    snapshot_step = -1
    for step in range(train_config.steps):
        lr = _lr_at(step, train_config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch = sample_clips(
            clips, train_config.batch_size, train_config.clip_len,
            train_config.crop, rng,
        )
        loss, logs = loss_fn(batch, _rate_weight_at(step, train_config))
        if not torch.isfinite(loss):
            with torch.no_grad():
                for p, saved in zip(params, snapshot):
                    p.copy_(saved)
            raise RuntimeError(
                f"training diverged at step {step}; parameters restored to "
                f"the state after step {snapshot_step}"
            )
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, train_config.grad_clip)
        optimizer.step()
        last_logs = {
            "stage": stage, "step": step, "lr": lr,
            "loss": float(loss.detach()), **logs,
        }
        if step % train_config.log_every == 0 or step == train_config.steps - 1:
            logger.log(last_logs)
            snapshot = [p.detach().clone() for p in params]
            snapshot_step = step
    return last_logs


def train_intra(
    model,
    clips: list[torch.Tensor],
    codec_config: CodecConfig,
    train_config: TrainConfig,
    log_path: Path | None = None,
) -> dict:
    """Warm up the intra codec alone on single frames."""
    lambda1 = codec_config.lambdas[0]

    def loss_fn(batch: torch.Tensor, rate_weight: float):
        frame = batch[:, 0]
        out = model.forward_iframe(frame, mode="train")
        num_pixels = frame.shape[0] * frame.shape[2] * frame.shape[3]
        dist = distortion2(out.x_hat, frame, codec_config.metric)
        bpp = _bpp(out.y_likelihood, num_pixels) + _bpp(out.z_likelihood, num_pixels)
        loss = lambda1 * dist + rate_weight * bpp
        return loss, {
            "loss": float(loss.detach()),
            "distortion": float(dist.detach()),
            "bpp": float(bpp.detach()),
        }

    params = [p for n, p in model.named_parameters() if n.startswith("intra.")]
    return _run_loop(params, loss_fn, clips, train_config, log_path, "intra")


def pretrain_inter(
    model,
    clips: list[torch.Tensor],
    codec_config: CodecConfig,
    train_config: TrainConfig,
    log_path: Path | None = None,
) -> dict:
    """Train motion modules with the intra and residual codecs frozen."""
    before = parameter_fingerprint(model, FROZEN_PRETRAIN_PREFIXES)
    frozen = [
        p for n, p in model.named_parameters()
        if n.startswith(FROZEN_PRETRAIN_PREFIXES)
    ]
    trained = [
        p for n, p in model.named_parameters()
        if not n.startswith(FROZEN_PRETRAIN_PREFIXES)
    ]
    for p in frozen:
        p.requires_grad_(False)
    try:
        def loss_fn(batch: torch.Tensor, rate_weight: float):
            loss, logs = pretrain_inter_loss(
                model, batch, codec_config, rate_weight=rate_weight
            )
            return loss, logs

        result = _run_loop(trained, loss_fn, clips, train_config, log_path, "pretrain")
    finally:
        for p in frozen:
            p.requires_grad_(True)
    after = parameter_fingerprint(model, FROZEN_PRETRAIN_PREFIXES)
    if before != after:
        raise RuntimeError("frozen intra/residual parameters changed during pretrain")
    return result


def train_end_to_end(
    model,
    clips: list[torch.Tensor],
    codec_config: CodecConfig,
    train_config: TrainConfig,
    log_path: Path | None = None,
) -> dict:
    """Joint rate-distortion training of the full model."""

    def loss_fn(batch: torch.Tensor, rate_weight: float):
        loss, logs = total_loss(
            model, batch, codec_config, rate_weight=rate_weight
        )
        return loss, logs

    params = [p for p in model.parameters() if p.requires_grad]
    return _run_loop(params, loss_fn, clips, train_config, log_path, "e2e")
