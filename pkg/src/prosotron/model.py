"""Integrated synthesis model: text encoder, optional prosody pathways,
autoregressive decoder, postnet.

Variants:
  baseline    - text + speaker only
  speech_side - variable-length embedding, one row per decoder step; the row
                joins both the attention query and the decoder input
  text_side   - reference attention summarizes the reference per encoder
                position; the summary is concatenated to every use of the
                encoder states
"""

from __future__ import annotations

import torch
from torch import nn

from . import dsp
from .config import TrainConfig
from .errors import ContractError, NumericError
from .prosody_control import ReferenceAttention, SpeakerProsodyMeans
from .reference_encoder import ConvStackConfig, ReferenceEncoder, split_key_value
from .seq2seq import AdditiveAttention, DecoderCell, Postnet, TextEncoder

# free-running synthesis stops after 5 consecutive frames whose mean scaled
# log-mel sits within 0.1 nats of the log floor
SILENCE_MARGIN_NATS = 0.1
SILENCE_RUN_FRAMES = 5
FALLBACK_MAX_FRAMES = 400


def _silence_threshold() -> float:
    return dsp.scale_log(dsp.LOG_FLOOR_LOG + SILENCE_MARGIN_NATS)


class ProsodyTTS(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.d_e)
        self.speaker_table = nn.Embedding(cfg.n_speakers, cfg.speaker_dim)

        key_dim = cfg.d_e + (cfg.h if cfg.variant == "text_side" else 0)
        prosody_dim = cfg.h if cfg.variant == "speech_side" else 0
        self.attention = AdditiveAttention(key_dim, cfg.decoder_dim, cfg.attn_dim, prosody_dim)
        self.decoder = DecoderCell(
            key_dim,
            cfg.speaker_dim,
            prosody_dim,
            cfg.n_mels,
            cfg.r,
            cfg.decoder_dim,
            cfg.prenet_hidden,
            cfg.prenet_out,
        )
        self.postnet = Postnet(cfg.n_mels, cfg.n_linear, cfg.postnet_hidden)

        if cfg.variant != "baseline":
            stack = {
                "default": ConvStackConfig.default,
                "small": ConvStackConfig.small,
                "tiny": lambda: ConvStackConfig.tiny(cfg.r),
            }[cfg.reference_stack]()
            if cfg.variant == "speech_side":
                stack.require_time_compression(cfg.r)
            ref_out = cfg.h if cfg.variant == "speech_side" else 2 * cfg.h
            self.reference_encoder = ReferenceEncoder(cfg.n_mels, ref_out, stack)
            self.prosody_means = SpeakerProsodyMeans(cfg.n_speakers, ref_out)
        if cfg.variant == "text_side":
            self.reference_attention = ReferenceAttention(cfg.d_e, cfg.h)

        self.register_buffer("max_train_frames", torch.zeros((), dtype=torch.int64))
        self._trace: list | None = None

    # -- wiring trace ----------------------------------------------------------

    def record_wiring(self, on: bool) -> None:
        """Capture per-step attention/decoder input components for structural tests."""
        self._trace = [] if on else None

    @property
    def wiring_trace(self) -> list:
        if self._trace is None:
            raise ContractError("wiring trace not enabled")
        return self._trace

    def _record(self, **entry) -> None:
        if self._trace is not None:
            self._trace.append(entry)

    # -- reference pathway --------------------------------------------------------

    def extract_prosody(self, reference_mel: torch.Tensor) -> torch.Tensor:
        """Variable-length embedding of a scaled log-mel reference [B, T, n_mels]."""
        if self.cfg.variant == "baseline":
            raise ContractError("baseline variant has no reference encoder")
        if reference_mel.shape[1] % self.cfg.r != 0:
            raise ContractError(
                f"reference frame count must be a multiple of r={self.cfg.r}, "
                f"got {reference_mel.shape[1]}"
            )
        return self.reference_encoder(reference_mel, mode="variable")

    def normalize_prosody(
        self, embedding: torch.Tensor, speaker_ids: torch.Tensor, strict: bool = True
    ) -> torch.Tensor:
        """Batched speaker-mean subtraction; [B, l, width] minus each item's mean."""
        rows = []
        for i in range(embedding.shape[0]):
            rows.append(
                self.prosody_means.normalize(embedding[i], int(speaker_ids[i]), strict=strict)
            )
        return torch.stack(rows)

    def _conditioning(
        self,
        text_states: torch.Tensor,
        text_mask: torch.Tensor,
        reference_mel: torch.Tensor | None,
        speaker_ids: torch.Tensor,
        prosody_override: torch.Tensor | None = None,
        strict_normalize: bool = True,
    ):
        """Returns (attention keys, per-step prosody or None, raw embedding, beta or None)."""
        cfg = self.cfg
        if cfg.variant == "baseline":
            return text_states, None, None, None
        if prosody_override is not None:
            raw = prosody_override
        else:
            if reference_mel is None:
                raise ContractError(f"{cfg.variant} variant needs a reference spectrogram")
            raw = self.extract_prosody(reference_mel)
        used = raw
        if cfg.normalize:
            used = self.normalize_prosody(raw, speaker_ids, strict=strict_normalize)
        if cfg.variant == "speech_side":
            return text_states, used, raw, None
        keys, values = split_key_value(used)
        summary, beta = self.reference_attention(text_states, keys, values)
        return torch.cat([text_states, summary], dim=-1), None, raw, beta

    # -- teacher-forced forward ------------------------------------------------------

    def forward(
        self,
        text_ids: torch.Tensor,
        text_mask: torch.Tensor,
        mel_target: torch.Tensor,
        speaker_ids: torch.Tensor,
        update_means: bool = False,
        frame_lengths: torch.Tensor | None = None,
        reference_mel: torch.Tensor | None = None,
    ) -> dict:
        """Teacher-forced pass; the reference spectrogram defaults to the target itself."""
        cfg = self.cfg
        b, t_frames, _ = mel_target.shape
        if t_frames % cfg.r != 0:
            raise ContractError(f"target frames must be a multiple of r={cfg.r}")
        steps = t_frames // cfg.r

        text_states = self.text_encoder(text_ids, text_mask)
        keys, step_prosody, raw, beta = self._conditioning(
            text_states,
            text_mask,
            reference_mel if reference_mel is not None else mel_target,
            speaker_ids,
            strict_normalize=False,
        )
        if step_prosody is not None and step_prosody.shape[1] != steps:
            raise ContractError(
                f"prosody length {step_prosody.shape[1]} != decoder steps {steps}"
            )
        if update_means and cfg.normalize:
            valid_steps = (
                torch.ceil(frame_lengths.to(torch.float64) / cfg.r).to(torch.int64)
                if frame_lengths is not None
                else torch.full((b,), steps, dtype=torch.int64)
            )
            for i in range(b):
                self.prosody_means.update(raw[i], int(speaker_ids[i]), int(valid_steps[i]))

        speaker = self.speaker_table(speaker_ids)
        state = self.decoder.initial_state(b, mel_target.device, mel_target.dtype)
        prev_frame = torch.zeros(b, cfg.n_mels, device=mel_target.device, dtype=mel_target.dtype)
        mel_out, alphas = [], []
        for i in range(steps):
            p_i = step_prosody[:, i, :] if step_prosody is not None else None
            alpha = self.attention(keys, text_mask, state[1], p_i)
            context = torch.bmm(alpha.unsqueeze(1), keys).squeeze(1)
            self._record(
                attention={
                    "keys": tuple(keys.shape),
                    "query": tuple(state[1].shape),
                    "prosody": tuple(p_i.shape) if p_i is not None else None,
                },
                decoder={
                    "context": tuple(context.shape),
                    "prev_frame": tuple(prev_frame.shape),
                    "speaker": tuple(speaker.shape),
                    "prosody": tuple(p_i.shape) if p_i is not None else None,
                },
            )
            frames, state = self.decoder(context, prev_frame, speaker, state, p_i)
            mel_out.append(frames)
            alphas.append(alpha)
            prev_frame = mel_target[:, (i + 1) * cfg.r - 1, :]  # teacher forcing
        mel_pred = torch.cat(mel_out, dim=1)
        lin_pred = self.postnet(mel_pred)
        return {
            "mel": mel_pred,
            "linear": lin_pred,
            "alpha": torch.stack(alphas, dim=1),
            "prosody": raw,
            "beta": beta,
        }

    # -- free-running synthesis ---------------------------------------------------------

    @torch.no_grad()
    def synthesize(
        self,
        text_ids: torch.Tensor,
        speaker_id: int,
        reference_mel: torch.Tensor | None = None,
        prosody_override: torch.Tensor | None = None,
        max_frames: int | None = None,
    ) -> dict:
        """Autoregressive inference for one utterance.

        text_ids: [L] int64. Speech-side runs exactly one step per prosody
        row; other variants run until silence or the frame budget.
        """
        cfg = self.cfg
        if text_ids.ndim != 1 or len(text_ids) < 1:
            raise ContractError("need a nonempty 1-D phoneme id tensor")
        device = text_ids.device
        ids = text_ids.unsqueeze(0)
        mask = torch.ones_like(ids, dtype=torch.bool)
        speaker_ids = torch.tensor([speaker_id], device=device)

        text_states = self.text_encoder(ids, mask)
        keys, step_prosody, raw, beta = self._conditioning(
            text_states, mask, reference_mel, speaker_ids,
            prosody_override=prosody_override, strict_normalize=True,
        )

        if cfg.variant == "speech_side":
            steps = step_prosody.shape[1]
        else:
            budget = max_frames if max_frames is not None else (
                2 * int(self.max_train_frames) or 2 * FALLBACK_MAX_FRAMES
            )
            steps = max(1, -(-budget // cfg.r))

        speaker = self.speaker_table(speaker_ids)
        dtype = next(self.parameters()).dtype
        state = self.decoder.initial_state(1, device, dtype)
        prev_frame = torch.zeros(1, cfg.n_mels, device=device, dtype=dtype)
        threshold = _silence_threshold()
        silent_run = 0
        mel_out, alphas = [], []
        for i in range(steps):
            p_i = step_prosody[:, i, :] if step_prosody is not None else None
            alpha = self.attention(keys, mask, state[1], p_i)
            context = torch.bmm(alpha.unsqueeze(1), keys).squeeze(1)
            frames, state = self.decoder(context, prev_frame, speaker, state, p_i)
            mel_out.append(frames)
            alphas.append(alpha)
            prev_frame = frames[:, -1, :]
            if cfg.variant != "speech_side":
                frame_means = frames[0].mean(dim=1)
                for m in frame_means:
                    silent_run = silent_run + 1 if float(m) < threshold else 0
                if silent_run >= SILENCE_RUN_FRAMES:
                    break
        mel_pred = torch.cat(mel_out, dim=1)
        if not torch.isfinite(mel_pred).all():
            raise NumericError("synthesis produced non-finite mel frames")
        lin_pred = self.postnet(mel_pred)
        return {
            "mel": mel_pred[0],
            "linear": lin_pred[0],
            "alpha": torch.cat(alphas, dim=0),
            "prosody": raw[0] if raw is not None else None,
            "beta": beta[0] if beta is not None else None,
        }

    def waveform_from_linear(self, linear_scaled: torch.Tensor, iterations: int = 60) -> dsp.Waveform:
        """Invert a scaled log-magnitude output to audio."""
        mags = dsp.scaled_to_linear(linear_scaled.detach().cpu().numpy())
        return dsp.griffin_lim(mags, iterations=iterations)


def build_model(cfg: TrainConfig) -> ProsodyTTS:
    torch.manual_seed(cfg.seed)
    return ProsodyTTS(cfg)
