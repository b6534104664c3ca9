"""Training/model configuration: one flat record, file round-trip, stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError

VARIANTS = ("baseline", "speech_side", "text_side")
# the embedding bottleneck is the only regularizer, so its width is pinned
# per variant rather than tunable
BOTTLENECK_BY_VARIANT = {"speech_side": 2, "text_side": 4, "baseline": 0}


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "baseline"
    normalize: bool = False
    h: int = -1  # -1 resolves to the variant's required bottleneck
    r: int = 4

    n_speakers: int = 2
    vocab_size: int = 40
    n_mels: int = 80
    n_linear: int = 513

    d_e: int = 256
    decoder_dim: int = 256
    attn_dim: int = 128
    speaker_dim: int = 64
    prenet_hidden: int = 256
    prenet_out: int = 128
    postnet_hidden: int = 128
    reference_stack: str = "default"

    learning_rate: float = 1e-3
    lr_decay_steps: tuple[int, ...] = (50000, 100000)
    lr_decay_factor: float = 0.5
    batch_size: int = 16
    max_steps: int = 2000
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        required = BOTTLENECK_BY_VARIANT[self.variant]
        if self.h == -1:
            object.__setattr__(self, "h", required)
        elif self.h != required:
            raise ContractError(
                f"bottleneck h must be {required} for {self.variant}, got {self.h}"
            )
        if self.variant == "baseline" and self.normalize:
            raise ContractError("normalization requires a prosody-conditioned variant")
        if self.r < 1:
            raise ContractError("reduction factor must be >= 1")
        if self.reference_stack not in ("default", "small", "tiny"):
            raise ContractError("reference_stack must be 'default', 'small', or 'tiny'")
        for name in ("n_speakers", "vocab_size", "batch_size", "max_steps"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw not in ("true", "false"):
            raise ContractError(f"{name}: expected true/false, got {raw!r}")
        return raw == "true"
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "str":
        return raw
    if kind.startswith("tuple"):
        return tuple(int(x) for x in raw.split(",") if x)
    raise ContractError(f"unhandled config field type for {name}")


def config_from_text(text: str) -> TrainConfig:
    """Parse flat key=value lines; unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ContractError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ContractError(f"line {lineno}: {exc}") from exc
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))
