"""Encoder, attention, autoregressive decoder, postnet, and training loss."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ContractError


class Prenet(nn.Module):
    """Two dense layers with ReLU and dropout; dropout is off in eval mode."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, dropout: float = 0.5):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.dropout(torch.relu(self.fc1(x)))
        return self.dropout(torch.relu(self.fc2(x)))


class TextEncoder(nn.Module):
    """Phoneme ids -> one d_e-dim state per symbol via embedding, prenet, BiGRU."""

    def __init__(self, vocab_size: int, d_e: int):
        super().__init__()
        if d_e % 2 != 0:
            raise ContractError("encoder dim must be even for the bidirectional split")
        self.embedding = nn.Embedding(vocab_size, d_e)
        # light dropout only: heavy key noise stalls attention on small corpora
        self.prenet = Prenet(d_e, d_e, d_e // 2, dropout=0.1)
        self.gru = nn.GRU(d_e // 2, d_e // 2, batch_first=True, bidirectional=True)
        self.d_e = d_e

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """ids: [B, L] int64; mask: [B, L] bool. Returns [B, L, d_e]."""
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ContractError("need a nonempty [B, L] id tensor")
        x = self.prenet(self.embedding(ids))
        out, _ = self.gru(x)
        return out * mask.unsqueeze(-1).to(out.dtype)


class AdditiveAttention(nn.Module):
    """Location-free tanh attention; the query may carry a per-step prosody vector."""

    def __init__(self, key_dim: int, query_dim: int, attn_dim: int, prosody_dim: int = 0):
        super().__init__()
        self.key_proj = nn.Linear(key_dim, attn_dim, bias=False)
        self.query_proj = nn.Linear(query_dim, attn_dim)
        self.prosody_dim = prosody_dim
        if prosody_dim > 0:
            self.prosody_proj = nn.Linear(prosody_dim, attn_dim, bias=False)
        self.score = nn.Linear(attn_dim, 1, bias=False)

    def forward(
        self,
        keys: torch.Tensor,
        mask: torch.Tensor,
        query: torch.Tensor,
        prosody: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """keys: [B, L, key_dim]; mask: [B, L] bool; query: [B, query_dim];
        prosody: [B, prosody_dim] or None. Returns weights [B, L]."""
        if not mask.any(dim=1).all():
            raise ContractError("attention needs at least one unmasked position per item")
        if (prosody is not None) != (self.prosody_dim > 0):
            raise ContractError("prosody input must match the configured prosody_dim")
        hidden = self.key_proj(keys) + self.query_proj(query).unsqueeze(1)
        if prosody is not None:
            hidden = hidden + self.prosody_proj(prosody).unsqueeze(1)
        energies = self.score(torch.tanh(hidden)).squeeze(-1)
        energies = energies.masked_fill(~mask, float("-inf"))
        return torch.softmax(energies, dim=1)


class DecoderCell(nn.Module):
    """One autoregressive step: prenet on the previous frame, two GRU cells, r-frame output.

    The step input is the concatenation of the attention context, the prenet
    output, the speaker embedding, and (for speech-side conditioning) the
    per-step prosody vector.
    """

    def __init__(
        self,
        context_dim: int,
        speaker_dim: int,
        prosody_dim: int,
        n_mels: int,
        r: int,
        hidden: int,
        prenet_hidden: int,
        prenet_out: int,
    ):
        super().__init__()
        self.prenet = Prenet(n_mels, prenet_hidden, prenet_out)
        in_dim = context_dim + prenet_out + speaker_dim + prosody_dim
        self.cell1 = nn.GRUCell(in_dim, hidden)
        self.cell2 = nn.GRUCell(hidden, hidden)
        self.out_proj = nn.Linear(hidden, n_mels * r)
        self.hidden = hidden
        self.n_mels = n_mels
        self.r = r
        self.prosody_dim = prosody_dim

    def initial_state(self, batch: int, device, dtype) -> tuple[torch.Tensor, torch.Tensor]:
        z = torch.zeros(batch, self.hidden, device=device, dtype=dtype)
        return z, z.clone()

    def forward(
        self,
        context: torch.Tensor,
        prev_frame: torch.Tensor,
        speaker: torch.Tensor,
        state: tuple[torch.Tensor, torch.Tensor],
        prosody: torch.Tensor | None = None,
    ):
        """Returns ([B, r, n_mels] frames, next state)."""
        if (prosody is not None) != (self.prosody_dim > 0):
            raise ContractError("prosody input must match the configured prosody_dim")
        parts = [context, self.prenet(prev_frame), speaker]
        if prosody is not None:
            parts.append(prosody)
        h1 = self.cell1(torch.cat(parts, dim=-1), state[0])
        h2 = self.cell2(h1, state[1])
        # project from the top cell only: shortcut paths into the projection
        # (h1 or the context) let the decoder fit spectra while ignoring the
        # attention, which stalls alignment on multi-utterance training
        frames = self.out_proj(h2).view(-1, self.r, self.n_mels)
        return frames, (h1, h2)


class Postnet(nn.Module):
    """Mel frames -> non-negative linear-frequency frames (conv stack + BiGRU)."""

    def __init__(self, n_mels: int, n_linear: int, hidden: int = 128, n_convs: int = 3):
        super().__init__()
        convs = []
        in_ch = n_mels
        for _ in range(n_convs):
            convs.append(nn.Conv1d(in_ch, hidden, kernel_size=5, padding=2))
            convs.append(nn.BatchNorm1d(hidden))
            convs.append(nn.ReLU())
            in_ch = hidden
        self.convs = nn.Sequential(*convs)
        self.gru = nn.GRU(hidden, hidden // 2, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(hidden, n_linear)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """mel: [B, T, n_mels] -> [B, T, n_linear], entries >= 0."""
        x = self.convs(mel.transpose(1, 2)).transpose(1, 2)
        x, _ = self.gru(x)
        return torch.relu(self.proj(x))


def masked_l1_loss(
    mel_pred: torch.Tensor,
    mel_target: torch.Tensor,
    lin_pred: torch.Tensor,
    lin_target: torch.Tensor,
    frame_mask: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Equal-weight masked mean absolute error; returns (total, mel term, linear term)."""
    if mel_pred.shape != mel_target.shape or lin_pred.shape != lin_target.shape:
        raise ContractError("prediction and target shapes must match")
    if frame_mask.shape != mel_pred.shape[:2]:
        raise ContractError("frame mask must be [B, T]")
    mask = frame_mask.to(mel_pred.dtype).unsqueeze(-1)
    denom_mel = mask.sum() * mel_pred.shape[-1]
    denom_lin = mask.sum() * lin_pred.shape[-1]
    loss_mel = (torch.abs(mel_pred - mel_target) * mask).sum() / denom_mel
    loss_lin = (torch.abs(lin_pred - lin_target) * mask).sum() / denom_lin
    return 0.5 * loss_mel + 0.5 * loss_lin, loss_mel, loss_lin
