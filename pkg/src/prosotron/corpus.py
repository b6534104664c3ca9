"""Synthetic corpus with known pitch and amplitude contours.

Utterances are built from a harmonic source shaped by per-phoneme formant
envelopes, so every training example carries an oracle prosody track that
later evaluation can regress against.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ContractError

VOCAB_SIZE = 40
PAD_ID = 0
EOS_ID = 1
MAX_PHONEMES = 200
MIN_FRAMES_PER_PHONEME = 5

BASE_PITCH_HZ = 160.0
NUM_HARMONICS = 10
SOURCE_RMS = 0.2
# closed phoneme inventory: the formant table is part of the language
# definition, not of any particular corpus, so its seed is a fixed constant
_FORMANT_TABLE_SEED = 714025


@dataclass(frozen=True)
class PhonemeSequence:
    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        if ids.ndim != 1 or not 1 <= len(ids) <= MAX_PHONEMES:
            raise ContractError(f"phoneme sequence length must be in [1, {MAX_PHONEMES}]")
        if ids.min() < 0 or ids.max() >= VOCAB_SIZE:
            raise ContractError(f"phoneme ids must lie in [0, {VOCAB_SIZE})")

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class ProsodyTrack:
    pitch: np.ndarray
    amplitude: np.ndarray

    def __post_init__(self):
        pitch = np.asarray(self.pitch, dtype=np.float64)
        amplitude = np.asarray(self.amplitude, dtype=np.float64)
        object.__setattr__(self, "pitch", pitch)
        object.__setattr__(self, "amplitude", amplitude)
        if pitch.shape != amplitude.shape or pitch.ndim != 1:
            raise ContractError("pitch and amplitude must be 1-D arrays of equal length")
        voiced = pitch > 0
        if np.any((pitch[voiced] < 60.0) | (pitch[voiced] > 600.0)):
            raise ContractError("voiced pitch must lie in [60, 600] Hz")
        if np.any((amplitude < 0.0) | (amplitude > 1.0)):
            raise ContractError("amplitude must lie in [0, 1]")

    def __len__(self):
        return len(self.pitch)


@dataclass(frozen=True)
class SpeakerProfile:
    base_pitch_multiplier: float
    spectral_tilt: float


def default_profiles(n_speakers: int) -> list[SpeakerProfile]:
    """Log-spaced base-pitch multipliers from 1.4x down to 0.8x."""
    if n_speakers < 2:
        raise ContractError("need at least 2 speakers")
    mults = np.exp(np.linspace(np.log(1.4), np.log(0.8), n_speakers))
    tilts = [-0.2 if i % 2 == 0 else -0.5 for i in range(n_speakers)]
    return [SpeakerProfile(float(m), t) for m, t in zip(mults, tilts)]


@dataclass
class Utterance:
    id: str
    speaker_id: int
    phonemes: PhonemeSequence
    wav_path: Path
    oracle: ProsodyTrack | None = None
    _features: tuple | None = field(default=None, repr=False, compare=False)

    def waveform(self) -> dsp.Waveform:
        return dsp.read_wav(self.wav_path)

    def features(self):
        """Scaled log-mel and scaled log-linear targets, cached after first use."""
        if self._features is None:
            wave = self.waveform()
            mel = dsp.scale_log(dsp.mel_spectrogram(wave).frames)
            linear = dsp.linear_to_scaled(dsp.stft(wave))
            self._features = (mel, linear)
        return self._features


def _formant_table() -> np.ndarray:
    """Per-phoneme formant parameters, shape [V, 3, 3] of (center, bandwidth, gain)."""
    rng = np.random.default_rng(_FORMANT_TABLE_SEED)
    centers = np.stack(
        [
            rng.uniform(250.0, 900.0, VOCAB_SIZE),
            rng.uniform(900.0, 2500.0, VOCAB_SIZE),
            rng.uniform(2500.0, 3800.0, VOCAB_SIZE),
        ],
        axis=1,
    )
    bandwidths = rng.uniform(80.0, 160.0, (VOCAB_SIZE, 3))
    gains = rng.uniform(0.5, 1.0, (VOCAB_SIZE, 3))
    return np.stack([centers, bandwidths, gains], axis=2)


_FORMANTS = _formant_table()


def _envelope(phoneme_ids: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Lorentzian formant envelope per frame, evaluated at per-frame frequencies.

    phoneme_ids: [T] id per frame; freqs: [T, K] Hz. Returns [T, K] gains.
    """
    params = _FORMANTS[phoneme_ids]  # [T, 3, 3]
    centers = params[:, None, :, 0]
    bw = params[:, None, :, 1]
    gain = params[:, None, :, 2]
    f = freqs[:, :, None]
    lorentz = gain * bw**2 / ((f - centers) ** 2 + bw**2)
    return lorentz.sum(axis=2)


def segment_boundaries(n_segments: int, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Frame index where each of n_segments ends; jittered near-uniform split."""
    if n_segments < 1 or n_frames < n_segments:
        raise ContractError("need at least one frame per segment")
    weights = 1.0 + 0.2 * rng.uniform(-1.0, 1.0, n_segments)
    ends = np.round(np.cumsum(weights) / weights.sum() * n_frames).astype(np.int64)
    ends[-1] = n_frames
    # keep boundaries strictly increasing even under adversarial rounding
    for i in range(1, n_segments):
        ends[i] = max(ends[i], ends[i - 1] + 1)
    ends = np.minimum(ends, n_frames - (n_segments - 1 - np.arange(n_segments)))
    return ends


def _per_sample(frame_values: np.ndarray, n_samples: int) -> np.ndarray:
    """Hold each frame value across its hop; extend the last frame to the tail."""
    expanded = np.repeat(frame_values, dsp.HOP_LENGTH, axis=0)
    if len(expanded) < n_samples:
        pad = [(0, n_samples - len(expanded))] + [(0, 0)] * (frame_values.ndim - 1)
        expanded = np.pad(expanded, pad, mode="edge")
    return expanded[:n_samples]


def generate_synthetic_utterance(
    phonemes: PhonemeSequence,
    track: ProsodyTrack,
    profile: SpeakerProfile,
    seed: int,
) -> dsp.Waveform:
    """Render a harmonic-source utterance following the given prosody track.

    The waveform length is chosen so its analysis frame count equals the
    track length exactly. Deterministic for fixed inputs and seed.
    """
    n_frames = len(track)
    if n_frames < len(phonemes) * MIN_FRAMES_PER_PHONEME:
        raise ContractError(
            f"track length {n_frames} < {MIN_FRAMES_PER_PHONEME} frames "
            f"per phoneme for {len(phonemes)} phonemes"
        )
    rng = np.random.default_rng(seed)
    ends = segment_boundaries(len(phonemes), n_frames, rng)
    frame_phoneme = np.repeat(phonemes.ids, np.diff(np.concatenate([[0], ends])))

    harmonics = np.arange(1, NUM_HARMONICS + 1, dtype=np.float64)
    freqs = track.pitch[:, None] * harmonics[None, :]  # [T, K]
    gains = _envelope(frame_phoneme, freqs) * harmonics[None, :] ** profile.spectral_tilt
    gains = np.where(freqs < dsp.SAMPLE_RATE / 2, gains, 0.0)
    rms = np.sqrt(np.sum(gains**2, axis=1) / 2.0)
    gains = gains / np.maximum(rms, 1e-12)[:, None] * SOURCE_RMS

    n_samples = (n_frames - 1) * dsp.HOP_LENGTH + dsp.WIN_LENGTH
    f0 = _per_sample(track.pitch, n_samples)
    amp = _per_sample(track.amplitude, n_samples)
    gains_s = _per_sample(gains, n_samples)

    phase0 = rng.uniform(0.0, 2.0 * np.pi, NUM_HARMONICS)
    base_phase = 2.0 * np.pi * np.cumsum(f0) / dsp.SAMPLE_RATE
    voiced = f0 > 0
    source = np.sum(
        gains_s * np.sin(base_phase[:, None] * harmonics[None, :] + phase0[None, :]),
        axis=1,
    )
    noise = rng.normal(0.0, SOURCE_RMS, n_samples)
    samples = np.where(voiced, source, noise) * amp
    return dsp.Waveform(samples)


def _smooth_walk(rng: np.random.Generator, n: int, step_std: float, width: int = 9) -> np.ndarray:
    """Moving-average smoothed Gaussian random walk starting near zero."""
    walk = np.cumsum(rng.normal(0.0, step_std, n))
    kernel = np.ones(width) / width
    return np.convolve(np.pad(walk, (width // 2, width - 1 - width // 2), mode="edge"), kernel, mode="valid")


def _draw_contours(
    rng: np.random.Generator, n_frames: int, eos_start: int, profile: SpeakerProfile
) -> ProsodyTrack:
    """Smooth random-walk pitch/amplitude; frames from eos_start on are silent."""
    log_pitch = np.log(BASE_PITCH_HZ * profile.base_pitch_multiplier)
    pitch = np.exp(log_pitch + rng.normal(0.0, 0.04) + _smooth_walk(rng, n_frames, 0.03))
    pitch = np.clip(pitch, 75.0, 520.0)
    amplitude = np.clip(0.65 + _smooth_walk(rng, n_frames, 0.03), 0.2, 1.0)
    pitch[eos_start:] = 0.0
    amplitude[eos_start:] = 0.0
    return ProsodyTrack(pitch, amplitude)


def make_corpus(
    out_dir,
    n_utterances: int = 200,
    n_speakers: int = 2,
    seed: int = 0,
    min_frames: int = 160,
    max_frames: int = 320,
) -> Path:
    """Generate a corpus on disk and return the manifest path.

    Layout: <out_dir>/manifest.txt, wav/<id>.wav, oracle/<id>.csv. Identical
    arguments produce byte-identical output.
    """
    if n_speakers < 2:
        raise ContractError("need at least 2 speakers for cross-speaker transfer")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "oracle").mkdir(parents=True, exist_ok=True)
    profiles = default_profiles(n_speakers)

    lines = []
    for idx in range(n_utterances):
        rng = np.random.default_rng([seed, idx])
        speaker = idx % n_speakers
        profile = profiles[speaker]
        n_frames = int(rng.integers(min_frames, max_frames + 1))
        n_content = int(np.clip(n_frames // rng.integers(8, 13), 3, 30))
        content = rng.integers(2, VOCAB_SIZE, n_content)
        phonemes = PhonemeSequence(np.concatenate([content, [EOS_ID]]))

        # pre-derive the generator's jittered segmentation so the silent
        # tail of the contours lines up with the end-marker segment
        gen_seed = int(np.random.SeedSequence([seed, idx, 1]).generate_state(1)[0])
        ends = segment_boundaries(len(phonemes), n_frames, np.random.default_rng(gen_seed))
        track = _draw_contours(
            np.random.default_rng([seed, idx, 2]), n_frames, int(ends[-2]), profile
        )
        wave = generate_synthetic_utterance(phonemes, track, profile, gen_seed)

        uid = f"u{idx:04d}"
        wav_rel = f"wav/{uid}.wav"
        dsp.write_wav(out_dir / wav_rel, wave)
        _write_oracle_csv(out_dir / "oracle" / f"{uid}.csv", track)
        ids_text = " ".join(str(int(p)) for p in phonemes.ids)
        lines.append(f"{uid}|{speaker}|{ids_text}|{wav_rel}")

    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return manifest


def _write_oracle_csv(path: Path, track: ProsodyTrack) -> None:
    rows = [
        f"{i},{track.pitch[i]:.6f},{track.amplitude[i]:.6f}" for i in range(len(track))
    ]
    path.write_text("frame_index,pitch_hz,amplitude\n" + "\n".join(rows) + "\n", encoding="utf-8")


def read_oracle_csv(path) -> ProsodyTrack:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text or text[0] != "frame_index,pitch_hz,amplitude":
        raise ContractError(f"{path}: missing oracle CSV header")
    pitch, amplitude = [], []
    for line in text[1:]:
        _, p, a = line.split(",")
        pitch.append(float(p))
        amplitude.append(float(a))
    return ProsodyTrack(np.array(pitch), np.array(amplitude))


def load_manifest(path, n_speakers: int | None = None) -> list[Utterance]:
    """Parse a manifest; wav paths resolve relative to the manifest directory.

    Oracle CSVs are attached when oracle/<id>.csv exists next to the manifest.
    """
    path = Path(path)
    root = path.parent
    utterances = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != 4:
            raise ContractError(f"{path}:{lineno}: expected 4 '|'-separated fields")
        uid, speaker_text, ids_text, wav_rel = parts
        try:
            speaker = int(speaker_text)
            ids = np.array([int(tok) for tok in ids_text.split()], dtype=np.int64)
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: {exc}") from exc
        if speaker < 0 or (n_speakers is not None and speaker >= n_speakers):
            raise ContractError(f"{path}:{lineno}: speaker id {speaker} out of range")
        try:
            phonemes = PhonemeSequence(ids)
        except ContractError as exc:
            raise ContractError(f"{path}:{lineno}: {exc}") from exc
        oracle_path = root / "oracle" / f"{uid}.csv"
        oracle = read_oracle_csv(oracle_path) if oracle_path.exists() else None
        utterances.append(Utterance(uid, speaker, phonemes, root / wav_rel, oracle))
    return utterances


@dataclass(frozen=True)
class Batch:
    """Padded numpy batch; frame count is always a multiple of the reduction factor."""

    text_ids: np.ndarray  # [B, L] int64, padded with PAD_ID
    text_mask: np.ndarray  # [B, L] bool
    mel: np.ndarray  # [B, T, M] scaled log-mel
    linear: np.ndarray  # [B, T, F] scaled log-magnitude
    frame_mask: np.ndarray  # [B, T] bool
    speaker_ids: np.ndarray  # [B] int64
    frame_lengths: np.ndarray  # [B] int64, unpadded frame counts


def make_batch(utterances: list[Utterance], r: int) -> Batch:
    if not utterances:
        raise ContractError("cannot batch zero utterances")
    if r < 1:
        raise ContractError("reduction factor must be >= 1")
    feats = [u.features() for u in utterances]
    text_lens = [len(u.phonemes) for u in utterances]
    frame_lens = [f[0].shape[0] for f in feats]
    max_l = max(text_lens)
    max_t = -(-max(frame_lens) // r) * r
    b = len(utterances)
    n_mel = feats[0][0].shape[1]
    n_lin = feats[0][1].shape[1]

    text_ids = np.full((b, max_l), PAD_ID, dtype=np.int64)
    text_mask = np.zeros((b, max_l), dtype=bool)
    mel = np.zeros((b, max_t, n_mel))
    linear = np.zeros((b, max_t, n_lin))
    frame_mask = np.zeros((b, max_t), dtype=bool)
    for i, (u, (m, lin)) in enumerate(zip(utterances, feats)):
        text_ids[i, : text_lens[i]] = u.phonemes.ids
        text_mask[i, : text_lens[i]] = True
        mel[i, : frame_lens[i]] = m
        linear[i, : frame_lens[i]] = lin
        frame_mask[i, : frame_lens[i]] = True
    return Batch(
        text_ids,
        text_mask,
        mel,
        linear,
        frame_mask,
        np.array([u.speaker_id for u in utterances], dtype=np.int64),
        np.array(frame_lens, dtype=np.int64),
    )


def corpus_digest(manifest_path) -> str:
    """Stable content hash over the manifest and every referenced wav file."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    root = manifest_path.parent
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            h.update((root / line.split("|")[3]).read_bytes())
    return h.hexdigest()
