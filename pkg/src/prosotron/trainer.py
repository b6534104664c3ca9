"""Teacher-forced training loop with deterministic seeding, metrics logging,
and checkpointing."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from .config import TrainConfig, config_from_text
from .errors import ContractError, NumericError
from .model import ProsodyTTS, build_model
from .seq2seq import masked_l1_loss

CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,loss_mel,loss_lin,lr,wall_time"


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    final_loss: float
    steps: int


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    lr = cfg.learning_rate
    for milestone in cfg.lr_decay_steps:
        if step >= milestone:
            lr *= cfg.lr_decay_factor
    return lr


def batch_to_tensors(batch: corpus_mod.Batch) -> dict:
    return {
        "text_ids": torch.from_numpy(batch.text_ids),
        "text_mask": torch.from_numpy(batch.text_mask),
        "mel": torch.from_numpy(batch.mel).float(),
        "linear": torch.from_numpy(batch.linear).float(),
        "frame_mask": torch.from_numpy(batch.frame_mask),
        "speaker_ids": torch.from_numpy(batch.speaker_ids),
        "frame_lengths": torch.from_numpy(batch.frame_lengths),
    }


def train_step(
    model: ProsodyTTS,
    optimizer: torch.optim.Optimizer,
    tensors: dict,
    cfg: TrainConfig,
    step: int,
) -> tuple[float, float]:
    """One gradient step; returns (mel loss, linear loss)."""
    model.train()
    lr = learning_rate_at(cfg, step)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    out = model(
        tensors["text_ids"],
        tensors["text_mask"],
        tensors["mel"],
        tensors["speaker_ids"],
        update_means=True,
        frame_lengths=tensors["frame_lengths"],
    )
    total, loss_mel, loss_lin = masked_l1_loss(
        out["mel"], tensors["mel"], out["linear"], tensors["linear"], tensors["frame_mask"]
    )
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss at step {step}")
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    model.max_train_frames.fill_(
        max(int(model.max_train_frames), int(tensors["frame_lengths"].max()))
    )
    return float(loss_mel.detach()), float(loss_lin.detach())


def train(
    cfg: TrainConfig,
    manifest_path,
    out_dir,
    log_every: int = 25,
) -> TrainResult:
    """Run cfg.max_steps of training; writes config, metrics CSV, and a checkpoint.

    Batches are drawn without replacement per step from a seed-determined
    stream, so a fixed seed reproduces the loss trajectory bit-for-bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    utterances = corpus_mod.load_manifest(manifest_path, n_speakers=cfg.n_speakers)
    if not utterances:
        raise ContractError(f"{manifest_path}: empty corpus")

    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sampler = np.random.default_rng(cfg.seed)
    cfg.save(out_dir / "config.txt")

    metrics_path = out_dir / "metrics.csv"
    start = time.monotonic()
    rows = [METRICS_HEADER]
    last_mel, last_lin = float("nan"), float("nan")
    for step in range(1, cfg.max_steps + 1):
        take = min(cfg.batch_size, len(utterances))
        idx = sampler.choice(len(utterances), size=take, replace=False)
        batch = corpus_mod.make_batch([utterances[i] for i in idx], cfg.r)
        tensors = batch_to_tensors(batch)
        try:
            last_mel, last_lin = train_step(model, optimizer, tensors, cfg, step)
        except NumericError:
            dump_path = out_dir / f"dump-step{step}.pt"
            torch.save(
                {"step": step, "utterance_ids": [utterances[i].id for i in idx],
                 "model_state": model.state_dict()},
                dump_path,
            )
            metrics_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
            raise NumericError(f"non-finite loss at step {step}; diagnostics at {dump_path}")
        if step % log_every == 0 or step == cfg.max_steps or step == 1:
            wall = time.monotonic() - start
            rows.append(
                f"{step},{last_mel:.6f},{last_lin:.6f},{learning_rate_at(cfg, step):.8f},{wall:.3f}"
            )
    metrics_path.write_text("\n".join(rows) + "\n", encoding="utf-8")

    checkpoint_path = out_dir / "checkpoint.pt"
    save_checkpoint(checkpoint_path, model, optimizer, cfg.max_steps, cfg)
    return TrainResult(checkpoint_path, metrics_path, 0.5 * (last_mel + last_lin), cfg.max_steps)


def save_checkpoint(path, model: ProsodyTTS, optimizer, step: int, cfg: TrainConfig) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config_text": cfg.to_text(),
            "config_hash": cfg.config_hash(),
            "step": step,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        },
        path,
    )


def load_checkpoint(path, expected_cfg: TrainConfig | None = None):
    """Returns (model, optimizer, step, cfg); refuses a config-hash mismatch."""
    path = Path(path)
    if not path.exists():
        raise ContractError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = config_from_text(blob["config_text"])
    if cfg.config_hash() != blob["config_hash"]:
        raise ContractError("checkpoint config text does not match its stored hash")
    if expected_cfg is not None and expected_cfg.config_hash() != blob["config_hash"]:
        raise ContractError(
            "checkpoint was trained under a different configuration "
            f"(stored {blob['config_hash'][:12]}, requested {expected_cfg.config_hash()[:12]})"
        )
    model = build_model(cfg)
    model.load_state_dict(blob["model_state"])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    if blob["optimizer_state"] is not None:
        optimizer.load_state_dict(blob["optimizer_state"])
    return model, optimizer, blob["step"], cfg
