"""Shared fixtures: the acceptance suite's trained models and datasets.

Training the acceptance models takes ~20 minutes on one CPU core, so the
state dicts are cached under /tmp keyed by a digest of the package source
and the training budgets; any code or budget change invalidates the cache.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import pytest
import torch

from cstrcodec.pipeline import CodecConfig
from cstrcodec.training import (
    TrainConfig,
    pretrain_inter,
    train_end_to_end,
    train_intra,
)
from cstrcodec.training.data import generate_clip

ACCEPTANCE_WIDTH = 48
INTRA_STEPS = 5000
INTRA_LR = 1e-3
PRETRAIN_STEPS = 2000
PRETRAIN_LR = 5e-4
E2E_STEPS = 1500
E2E_LR = 3e-4
BATCH = 2
PRETRAIN_LEN = 2
E2E_LEN = 4


def _train_specs() -> tuple:
    """A spread of motions and textures wide enough that models generalize
    to the held-out seeds instead of memorizing the training textures."""
    specs = []
    translate = [[2, 0], [0, 2], [-3, 1], [1, 1], [3, -2], [-1, -1], [2, 2],
                 [0, -3], [1, -2], [-2, 0], [3, 1], [-1, 2], [2, -1], [-2, -2],
                 [0, 3], [-3, -1], [1, 3], [3, 3], [-1, 0], [0, 1], [2, 3],
                 [-3, 2], [1, 0], [-2, 3]]
    for i, speed in enumerate(translate):
        specs.append({"kind": "translate", "size": [96, 96], "frames": 8,
                      "speed": speed, "seed": i})
    occlude = [[3, 0], [0, 2], [-2, 0], [2, 1], [0, -2], [-3, 0], [1, 2],
               [2, -2], [3, 1], [-1, -2], [0, 3], [-2, 2], [2, 0], [-3, -1],
               [1, -3], [3, -2]]
    for i, speed in enumerate(occlude):
        specs.append({"kind": "occlude", "size": [96, 96], "frames": 8,
                      "speed": speed, "seed": 20 + i})
    for i, degrees in enumerate([2.0, -2.0, 3.0, -1.5, 1.0, -3.0, 2.5, -1.0]):
        specs.append({"kind": "rotate", "size": [96, 96], "frames": 8,
                      "degrees": degrees, "seed": 40 + i})
    return tuple(specs)


TRAIN_SPECS = _train_specs()
HELDOUT_SPECS = (
    {"kind": "translate", "size": [64, 64], "frames": 6, "speed": [2, 0], "seed": 100},
    {"kind": "translate", "size": [64, 64], "frames": 6, "speed": [-2, 1], "seed": 101},
    {"kind": "occlude", "size": [64, 64], "frames": 6, "speed": [3, 0], "seed": 102},
    {"kind": "occlude", "size": [64, 64], "frames": 6, "speed": [0, 2], "seed": 103},
)


def _source_digest() -> str:
    root = Path(__file__).resolve().parent.parent / "src" / "cstrcodec"
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        digest.update(path.read_bytes())
    budgets = (
        ACCEPTANCE_WIDTH, INTRA_STEPS, PRETRAIN_STEPS, E2E_STEPS, BATCH,
        PRETRAIN_LEN, E2E_LEN, INTRA_LR, PRETRAIN_LR, E2E_LR,
        json.dumps(TRAIN_SPECS), json.dumps(HELDOUT_SPECS),
    )
    digest.update(repr(budgets).encode())
    return digest.hexdigest()[:16]


@pytest.fixture(scope="session")
def acceptance_data():
    train = [generate_clip(dict(s))["frames"] for s in TRAIN_SPECS]
    heldout = [(dict(s), generate_clip(dict(s))) for s in HELDOUT_SPECS]
    return {"train": train, "heldout": heldout}


def _config(variant: str, lambda_index: int = 0) -> CodecConfig:
    return CodecConfig(
        width=ACCEPTANCE_WIDTH, variant=variant, lambda_index=lambda_index
    )


def _train_shared_intra(clips):
    """The intra codec is architecturally identical across variants, so its
    long training stage runs once and the weights are copied into each."""
    torch.manual_seed(0)
    config = _config("full")
    model = config.build_model()
    train_intra(
        model, clips, config,
        TrainConfig(steps=INTRA_STEPS, batch_size=BATCH, clip_len=1, crop=64,
                    lr=INTRA_LR, lr_final=INTRA_LR / 10, decay_at=0.8,
                    seed=0, log_every=100),
    )
    return {
        k: v.detach().clone()
        for k, v in model.state_dict().items()
        if k.startswith("intra.")
    }


def _train_stage1(variant: str, intra_state: dict, clips, log_path: Path):
    torch.manual_seed(0)
    config = _config(variant)
    model = config.build_model()
    merged = model.state_dict()
    merged.update(copy.deepcopy(intra_state))
    model.load_state_dict(merged)
    pretrain_inter(
        model, clips, config,
        TrainConfig(steps=PRETRAIN_STEPS, batch_size=BATCH,
                    clip_len=PRETRAIN_LEN, crop=64, lr=PRETRAIN_LR,
                    lr_final=PRETRAIN_LR / 10, decay_at=0.8,
                    seed=1, log_every=100),
        log_path=log_path,
    )
    return model


def _train_e2e(stage1_model, variant: str, lambda_index: int, clips):
    config = _config(variant, lambda_index)
    model = config.build_model()
    model.load_state_dict(copy.deepcopy(stage1_model.state_dict()))
    train_end_to_end(
        model, clips, config,
        TrainConfig(steps=E2E_STEPS, batch_size=BATCH, clip_len=E2E_LEN,
                    crop=64, lr=E2E_LR, lr_final=E2E_LR / 10, decay_at=0.8,
                    seed=2, log_every=100),
    )
    return model


def _train_all(clips, log_dir: Path) -> dict:
    state = {"pretrain_records": None, "full": {}, "variants": {}}
    intra_state = _train_shared_intra(clips)
    stage1 = _train_stage1(
        "full", intra_state, clips, log_dir / "full_pretrain.jsonl"
    )
    records = [
        json.loads(line)
        for line in (log_dir / "full_pretrain.jsonl").read_text().splitlines()
    ]
    state["pretrain_records"] = records
    for lam in range(4):
        state["full"][lam] = _train_e2e(stage1, "full", lam, clips)
    for variant in ("kernel-only", "vector-only"):
        s1 = _train_stage1(
            variant, intra_state, clips, log_dir / f"{variant}_pretrain.jsonl"
        )
        state["variants"][variant] = _train_e2e(s1, variant, 0, clips)
    return state


@pytest.fixture(scope="session")
def acceptance_models(acceptance_data, tmp_path_factory):
    """Trained models for the end-to-end acceptance criteria.

    Returns ``{"full": {lambda_index: model}, "variants": {name: model},
    "pretrain_records": [...]}`` with every model in eval mode.
    """
    cache = Path("/tmp") / f"cstrcodec_acceptance_{_source_digest()}.pt"
    if cache.exists():
        payload = torch.load(cache, map_location="cpu", weights_only=True)
        state = {"pretrain_records": payload["pretrain_records"],
                 "full": {}, "variants": {}}
        for lam_key, sd in payload["full"].items():
            model = _config("full", int(lam_key)).build_model()
            model.load_state_dict(sd)
            state["full"][int(lam_key)] = model
        for variant, sd in payload["variants"].items():
            model = _config(variant).build_model()
            model.load_state_dict(sd)
            state["variants"][variant] = model
    else:
        log_dir = tmp_path_factory.mktemp("acceptance_logs")
        state = _train_all(acceptance_data["train"], log_dir)
        payload = {
            "pretrain_records": state["pretrain_records"],
            "full": {str(k): m.state_dict() for k, m in state["full"].items()},
            "variants": {k: m.state_dict() for k, m in state["variants"].items()},
        }
        torch.save(payload, cache)
    for model in (*state["full"].values(), *state["variants"].values()):
        model.eval()
    return state


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[criterion {number}] {status}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
