"""Conditioning pathways: text-side reference attention, speaker-wise
prosody normalization, and embedding edits for control experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ContractError


class ReferenceAttention(nn.Module):
    """Scaled dot-product attention from encoder states onto reference keys.

    A bias-free linear map takes each d_e-dim encoder state to the key width
    h; weights are softmax(q . k / sqrt(h)) over reference positions.
    """

    def __init__(self, d_e: int, h: int):
        super().__init__()
        if h <= 0:
            raise ContractError("key width must be positive")
        self.query_proj = nn.Linear(d_e, h, bias=False)
        self.h = h

    def forward(
        self, encoder_states: torch.Tensor, keys: torch.Tensor, values: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """encoder_states: [B, L, d_e]; keys/values: [B, N, h].
        Returns (summary [B, L, h], weights [B, L, N])."""
        if keys.shape[1] < 1:
            raise ContractError("need at least one reference position")
        if keys.shape != values.shape:
            raise ContractError("keys and values must have matching shapes")
        queries = self.query_proj(encoder_states)  # [B, L, h]
        scores = torch.bmm(queries, keys.transpose(1, 2)) / math.sqrt(self.h)
        weights = torch.softmax(scores, dim=2)
        return torch.bmm(weights, values), weights


class SpeakerProsodyMeans(nn.Module):
    """Cumulative per-speaker mean of temporal sample means of the embedding.

    Stored as buffers so the accumulated means travel inside checkpoints.
    """

    def __init__(self, n_speakers: int, h: int):
        super().__init__()
        self.register_buffer("means", torch.zeros(n_speakers, h))
        self.register_buffer("counts", torch.zeros(n_speakers, dtype=torch.int64))

    @property
    def n_speakers(self) -> int:
        return self.means.shape[0]

    def update(self, embedding: torch.Tensor, speaker_id: int, length: int | None = None) -> None:
        """Fold one utterance's temporal sample mean into the speaker's running mean.

        embedding: [l_p, h]; length limits the mean to the unpadded prefix.
        """
        self._check_speaker(speaker_id)
        valid = embedding if length is None else embedding[:length]
        if valid.shape[0] < 1:
            raise ContractError("cannot update means from an empty embedding")
        sample_mean = valid.detach().mean(dim=0)
        count = int(self.counts[speaker_id])
        self.means[speaker_id] = (count * self.means[speaker_id] + sample_mean) / (count + 1)
        self.counts[speaker_id] = count + 1

    def normalize(self, embedding: torch.Tensor, speaker_id: int, strict: bool = True) -> torch.Tensor:
        """Subtract the speaker's stored mean from every time step.

        strict mode refuses speakers with no accumulated samples; non-strict
        subtracts nothing for them (training warm-up before the first update).
        """
        self._check_speaker(speaker_id)
        if int(self.counts[speaker_id]) == 0:
            if strict:
                raise ContractError(f"no accumulated prosody mean for speaker {speaker_id}")
            return embedding
        return embedding - self.means[speaker_id]

    def _check_speaker(self, speaker_id: int) -> None:
        if not 0 <= speaker_id < self.n_speakers:
            raise ContractError(f"unknown speaker id {speaker_id}")


@dataclass(frozen=True)
class EmbeddingEdit:
    """One pointwise edit: add delta or set a constant on a dim over a frame range."""

    dim: int
    start: int
    stop: int  # exclusive; None-like sentinel handled by edit_embedding
    action: str  # "add" | "set"
    value: float


def edit_embedding(embedding: np.ndarray, edits: list[EmbeddingEdit]) -> np.ndarray:
    """Apply edits and clamp at zero to preserve the embedding's value range."""
    p = np.array(embedding, dtype=np.float64, copy=True)
    if p.ndim != 2:
        raise ContractError("embedding must be [frames, dims]")
    n_frames, n_dims = p.shape
    for e in edits:
        if not 0 <= e.dim < n_dims:
            raise ContractError(f"edit dim {e.dim} out of range [0, {n_dims})")
        if not (0 <= e.start < e.stop <= n_frames):
            raise ContractError(f"edit range [{e.start}, {e.stop}) invalid for {n_frames} frames")
        if e.action == "add":
            p[e.start : e.stop, e.dim] += e.value
        elif e.action == "set":
            p[e.start : e.stop, e.dim] = e.value
        else:
            raise ContractError(f"unknown edit action {e.action!r}")
    return np.maximum(p, 0.0)


def parse_edit_spec(text: str, n_frames: int) -> list[EmbeddingEdit]:
    """Parse 'dim:action:value[:start-stop]' clauses separated by commas.

    Example: '0:set:0.5' (all frames), '1:add:0.3:10-20'.
    """
    edits = []
    for clause in filter(None, (c.strip() for c in text.split(","))):
        parts = clause.split(":")
        if len(parts) not in (3, 4):
            raise ContractError(f"bad edit clause {clause!r}")
        try:
            dim = int(parts[0])
            action = parts[1]
            if action not in ("add", "set"):
                raise ContractError(f"unknown edit action {action!r}")
            value = float(parts[2])
            if len(parts) == 4:
                start_text, stop_text = parts[3].split("-")
                start, stop = int(start_text), int(stop_text)
            else:
                start, stop = 0, n_frames
        except ValueError as exc:
            raise ContractError(f"bad edit clause {clause!r}: {exc}") from exc
        edits.append(EmbeddingEdit(dim, start, stop, action, value))
    return edits


def save_embedding_csv(path, embedding: np.ndarray) -> None:
    """CSV dump with header frame,dim0..dimH-1."""
    emb = np.asarray(embedding)
    if emb.ndim != 2:
        raise ContractError("embedding must be [frames, dims]")
    header = "frame," + ",".join(f"dim{i}" for i in range(emb.shape[1]))
    rows = [f"{t}," + ",".join(f"{v:.8f}" for v in emb[t]) for t in range(emb.shape[0])]
    Path(path).write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")


def load_embedding_csv(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or not lines[0].startswith("frame,dim0"):
        raise ContractError(f"{path}: missing embedding CSV header")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append([float(v) for v in cells[1:]])
    return np.array(rows)
