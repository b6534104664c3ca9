"""Reference encoder turning a mel-spectrogram into prosody embeddings.

A stack of strided 2-D convolutions (the first carrying coordinate
channels) compresses the reference, and a unidirectional GRU reads the
result. The last GRU step is the fixed-length embedding; the full sequence
is the variable-length embedding. Time strides multiply to the decoder
reduction factor so the variable-length embedding has one row per decoder
step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractError


def coordinate_channel(length: int, device, dtype) -> torch.Tensor:
    """Indices 0..length-1 mapped to [-1, 1]; a single element maps to 0."""
    if length == 1:
        return torch.zeros(1, device=device, dtype=dtype)
    idx = torch.arange(length, device=device, dtype=dtype)
    return 2.0 * idx / (length - 1) - 1.0


class CoordConv2d(nn.Module):
    """2-D convolution over [B, C, T, F] with time/frequency coordinate channels appended."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride):
        super().__init__()
        self.conv = nn.Conv2d(in_channels + 2, out_channels, kernel_size, stride)
        self.stride = self.conv.stride
        self.kernel_size = self.conv.kernel_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, t, f = x.shape
        tc = coordinate_channel(t, x.device, x.dtype).view(1, 1, t, 1).expand(b, 1, t, f)
        fc = coordinate_channel(f, x.device, x.dtype).view(1, 1, 1, f).expand(b, 1, t, f)
        x = torch.cat([x, tc, fc], dim=1)
        return self.conv(_pad_same(x, self.kernel_size, self.stride))


def _pad_same(x: torch.Tensor, kernel_size, stride) -> torch.Tensor:
    """Asymmetric zero padding so out_len = ceil(in_len / stride) per spatial axis."""
    pads = []
    for axis in (3, 2):  # F.pad wants last dim first
        n = x.shape[axis]
        k = kernel_size[axis - 2]
        s = stride[axis - 2]
        total = max((math.ceil(n / s) - 1) * s + k - n, 0)
        pads.extend([total // 2, total - total // 2])
    return nn.functional.pad(x, pads)


@dataclass(frozen=True)
class ConvLayerSpec:
    channels: int
    kernel: int = 3
    time_stride: int = 1
    freq_stride: int = 2


@dataclass(frozen=True)
class ConvStackConfig:
    """Layer specs for the reference conv stack; the first layer is a CoordConv."""

    layers: tuple[ConvLayerSpec, ...]

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ContractError("conv stack needs at least one layer")

    def time_stride_product(self) -> int:
        out = 1
        for layer in self.layers:
            out *= layer.time_stride
        return out

    def require_time_compression(self, r: int) -> None:
        got = self.time_stride_product()
        if got != r:
            raise ContractError(
                f"product of time strides must equal the reduction factor {r}, got {got}"
            )

    @staticmethod
    def default() -> "ConvStackConfig":
        channels = (32, 32, 64, 64, 128, 128)
        time_strides = (2, 2, 1, 1, 1, 1)
        return ConvStackConfig(
            tuple(ConvLayerSpec(c, 3, ts, 2) for c, ts in zip(channels, time_strides))
        )

    @staticmethod
    def small() -> "ConvStackConfig":
        """Same shape as the default stack at a quarter of the channel widths."""
        channels = (16, 16, 32, 32, 64, 64)
        time_strides = (2, 2, 1, 1, 1, 1)
        return ConvStackConfig(
            tuple(ConvLayerSpec(c, 3, ts, 2) for c, ts in zip(channels, time_strides))
        )

    @staticmethod
    def tiny(r: int = 4) -> "ConvStackConfig":
        """Two-layer stack for fast tests; time strides multiply to r for r in {1,2,4}."""
        if r not in (1, 2, 4):
            raise ContractError("tiny stack supports r in {1, 2, 4}")
        strides = {1: (1, 1), 2: (2, 1), 4: (2, 2)}[r]
        return ConvStackConfig(tuple(ConvLayerSpec(4, 3, ts, 2) for ts in strides))


def _strided_length(n: int, stride: int) -> int:
    return math.ceil(n / stride)


class ReferenceEncoder(nn.Module):
    """Mel reference -> non-negative prosody embedding sequence.

    output_dim is the embedding width: the bottleneck h for speech-side use,
    2h for text-side use (split into keys and values downstream).
    """

    def __init__(self, n_mels: int, output_dim: int, cfg: ConvStackConfig | None = None):
        super().__init__()
        self.cfg = cfg if cfg is not None else ConvStackConfig.default()
        self.n_mels = n_mels
        self.output_dim = output_dim

        layers = []
        in_ch = 1
        freq = n_mels
        for i, spec in enumerate(self.cfg.layers):
            conv_cls = CoordConv2d if i == 0 else _PlainSameConv
            layers.append(
                nn.ModuleDict(
                    {
                        "conv": conv_cls(in_ch, spec.channels, (spec.kernel, spec.kernel),
                                         (spec.time_stride, spec.freq_stride)),
                        "norm": nn.BatchNorm2d(spec.channels),
                    }
                )
            )
            in_ch = spec.channels
            freq = _strided_length(freq, spec.freq_stride)
        self.blocks = nn.ModuleList(layers)
        self.gru = nn.GRU(freq * in_ch, output_dim, batch_first=True)

    def conv_output_length(self, n_frames: int) -> int:
        out = n_frames
        for spec in self.cfg.layers:
            out = _strided_length(out, spec.time_stride)
        return out

    def forward(self, mel: torch.Tensor, mode: str = "variable") -> torch.Tensor:
        """mel: [B, T, n_mels] scaled log-mel. Returns [B, T', output_dim] or [B, output_dim]."""
        if mode not in ("variable", "fixed"):
            raise ContractError(f"mode must be 'variable' or 'fixed', got {mode!r}")
        if mel.ndim != 3 or mel.shape[2] != self.n_mels:
            raise ContractError(f"expected [B, T, {self.n_mels}] mel input, got {tuple(mel.shape)}")
        if self.conv_output_length(mel.shape[1]) < 1:
            raise ContractError("reference too short for the conv stride stack")
        x = mel.unsqueeze(1)  # [B, 1, T, F]
        for block in self.blocks:
            x = block["norm"](block["conv"](x))
            x = torch.relu(x)
        b, c, t, f = x.shape
        flat = x.permute(0, 2, 3, 1).reshape(b, t, f * c)
        out, _ = self.gru(flat)
        out = torch.relu(out)
        return out if mode == "variable" else out[:, -1, :]


class _PlainSameConv(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride)

    def forward(self, x):
        return self.conv(_pad_same(x, self.conv.kernel_size, self.conv.stride))


def split_key_value(p2h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a [.., 2h] embedding into key and value halves along the last axis."""
    width = p2h.shape[-1]
    if width % 2 != 0:
        raise ContractError(f"key/value split needs an even width, got {width}")
    h = width // 2
    return p2h[..., :h], p2h[..., h:]
