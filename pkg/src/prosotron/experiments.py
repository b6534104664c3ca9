"""Evaluation protocols over trained checkpoints: reconstruction and transfer
distortion, embedding edits, attention map emission, and melody contour
transfer. Each protocol returns an ExperimentReport that serializes to JSON
plus a per-utterance CSV."""

from __future__ import annotations

import json
import subprocess
import warnings
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from . import corpus as corpus_mod  # noqa: E402
from . import dsp  # noqa: E402
from .errors import ContractError  # noqa: E402
from .prosody_control import edit_embedding, parse_edit_spec, save_embedding_csv  # noqa: E402
from .trainer import load_checkpoint  # noqa: E402

MCD_CONVENTION = (
    "mean frame-wise Euclidean distance over MFCC c1..c13 "
    "(orthonormal DCT-II of log-mel, c0 dropped, no dB rescaling)"
)


def build_identifier() -> str:
    """Git description of the working tree, or the installed version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    try:
        return f"prosotron-{metadata.version('prosotron')}"
    except metadata.PackageNotFoundError:
        return "prosotron-unknown"


@dataclass
class ExperimentReport:
    protocol: str
    per_utterance: dict
    aggregate: float
    config_text: str
    build_id: str
    metrics: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    mcd_convention: str = MCD_CONVENTION

    def __post_init__(self):
        if self.per_utterance:
            mean = float(np.mean(list(self.per_utterance.values())))
            if abs(mean - self.aggregate) > 1e-9:
                raise ContractError(
                    f"aggregate {self.aggregate!r} != mean of per-utterance values {mean!r}"
                )

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{self.protocol}.json"
        payload = {
            "protocol": self.protocol,
            "aggregate": self.aggregate,
            "per_utterance": self.per_utterance,
            "metrics": self.metrics,
            "notes": self.notes,
            "artifacts": self.artifacts,
            "mcd_convention": self.mcd_convention,
            "build_id": self.build_id,
            "config": self.config_text,
        }
        json_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        rows = ["utterance_id,value"]
        rows += [f"{uid},{val:.6f}" for uid, val in self.per_utterance.items()]
        (out_dir / f"{self.protocol}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        return json_path


def _report(protocol, per_utterance, cfg, **kw) -> ExperimentReport:
    aggregate = float(np.mean(list(per_utterance.values()))) if per_utterance else 0.0
    return ExperimentReport(
        protocol=protocol,
        per_utterance=per_utterance,
        aggregate=aggregate,
        config_text=cfg.to_text(),
        build_id=build_identifier(),
        **kw,
    )


# ---------------------------------------------------------------------------
# shared plumbing


def load_for_eval(checkpoint_path, manifest_path):
    """Model in eval mode plus the evaluation utterances; warns at step 0."""
    model, _, step, cfg = load_checkpoint(checkpoint_path)
    model.eval()
    if step == 0:
        warnings.warn(f"{checkpoint_path}: checkpoint is untrained (step 0); proceeding")
    utterances = corpus_mod.load_manifest(manifest_path, n_speakers=cfg.n_speakers)
    return model, cfg, utterances, step


def select_utterances(utterances, limit=None, utterance_ids=None, speaker=None):
    chosen = utterances
    if speaker is not None:
        chosen = [u for u in chosen if u.speaker_id == speaker]
    if utterance_ids:
        wanted = set(utterance_ids)
        chosen = [u for u in chosen if u.id in wanted]
        missing = wanted - {u.id for u in chosen}
        if missing:
            raise ContractError(f"utterance ids not in manifest: {sorted(missing)}")
    if limit is not None:
        chosen = chosen[:limit]
    if not chosen:
        raise ContractError("no utterances selected")
    return chosen


def reference_tensor(utt, r: int) -> torch.Tensor:
    """Scaled log-mel reference [1, T, n_mels] trimmed to a multiple of r."""
    mel, _ = utt.features()
    trim = mel.shape[0] - mel.shape[0] % r
    if trim < r:
        raise ContractError(f"{utt.id}: too short for reduction factor {r}")
    return torch.from_numpy(mel[:trim]).float().unsqueeze(0)


def synthesize(model, utt, speaker_id=None, prosody_override=None):
    """Free-running synthesis for one utterance; returns (waveform, outputs)."""
    cfg = model.cfg
    ids = torch.from_numpy(utt.phonemes.ids)
    reference = None
    if cfg.variant != "baseline" and prosody_override is None:
        reference = reference_tensor(utt, cfg.r)
    out = model.synthesize(
        ids,
        speaker_id=utt.speaker_id if speaker_id is None else speaker_id,
        reference_mel=reference,
        prosody_override=prosody_override,
    )
    return model.waveform_from_linear(out["linear"]), out


# ---------------------------------------------------------------------------
# reconstruction / transfer


def reconstruct(checkpoint_path, manifest_path, limit=10, utterance_ids=None,
                out_dir=None) -> ExperimentReport:
    """Resynthesize each utterance from its own reference and speaker; MCD
    against the original audio."""
    model, cfg, utterances, step = load_for_eval(checkpoint_path, manifest_path)
    chosen = select_utterances(utterances, limit, utterance_ids)
    per, artifacts = {}, {}
    for utt in chosen:
        wav_gen, _ = synthesize(model, utt)
        per[utt.id] = dsp.mcd_between_waveforms(utt.waveform(), wav_gen)
        if out_dir is not None:
            path = Path(out_dir) / f"recon_{utt.id}.wav"
            path.parent.mkdir(parents=True, exist_ok=True)
            dsp.write_wav(path, wav_gen)
            artifacts[f"recon_{utt.id}"] = str(path)
    return _report("reconstruct", per, cfg,
                   metrics={"step": step}, artifacts=artifacts)


def transfer(checkpoint_path, manifest_path, source_speaker: int, target_speaker: int,
             limit=10, out_dir=None) -> ExperimentReport:
    """Prosody from source-speaker audio, identity of the target speaker."""
    model, cfg, utterances, step = load_for_eval(checkpoint_path, manifest_path)
    if cfg.variant == "baseline":
        raise ContractError("transfer requires a prosody-conditioned variant")
    notes = []
    if source_speaker == target_speaker:
        notes.append("source speaker equals target; this is a reconstruction")
    chosen = select_utterances(utterances, limit, speaker=source_speaker)
    profiles = corpus_mod.default_profiles(cfg.n_speakers)
    target_base = corpus_mod.BASE_PITCH_HZ * profiles[target_speaker].base_pitch_multiplier

    per, pitches, artifacts = {}, [], {}
    for utt in chosen:
        wav_gen, _ = synthesize(model, utt, speaker_id=target_speaker)
        per[utt.id] = dsp.mcd_between_waveforms(utt.waveform(), wav_gen)
        pitches.append(dsp.mean_pitch(wav_gen))
        if out_dir is not None:
            path = Path(out_dir) / f"transfer_{utt.id}_to_s{target_speaker}.wav"
            path.parent.mkdir(parents=True, exist_ok=True)
            dsp.write_wav(path, wav_gen)
            artifacts[f"transfer_{utt.id}"] = str(path)
    voiced = [p for p in pitches if p > 0]
    mean_output_pitch = float(np.mean(voiced)) if voiced else 0.0
    return _report(
        "transfer", per, cfg,
        metrics={
            "step": step,
            "source_speaker": source_speaker,
            "target_speaker": target_speaker,
            "mean_output_pitch_hz": mean_output_pitch,
            "target_base_pitch_hz": float(target_base),
            "mean_pitch_error_hz": abs(mean_output_pitch - float(target_base)),
        },
        notes=notes, artifacts=artifacts,
    )


# ---------------------------------------------------------------------------
# embedding control


def _save_spectrogram_image(scaled: np.ndarray, path: Path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.imshow(scaled.T, origin="lower", aspect="auto", cmap="magma")
    ax.set_xlabel("frame")
    ax.set_ylabel("bin")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _save_track_csv(path: Path, header: str, values: np.ndarray) -> None:
    rows = [header] + [f"{i},{v:.6f}" for i, v in enumerate(values)]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def control(checkpoint_path, manifest_path, utterance_id: str, edit_spec: str,
            out_dir) -> ExperimentReport:
    """Synthesize an utterance before and after an embedding edit; emit audio,
    spectrogram images, the embedding line plot, and pitch/energy tracks."""
    model, cfg, utterances, step = load_for_eval(checkpoint_path, manifest_path)
    if cfg.variant == "baseline":
        raise ContractError("embedding edits require a prosody-conditioned variant")
    utt = select_utterances(utterances, utterance_ids=[utterance_id])[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with torch.no_grad():
        original = model.extract_prosody(reference_tensor(utt, cfg.r))[0].numpy()
    edits = parse_edit_spec(edit_spec, original.shape[0]) if edit_spec else []
    edited = edit_embedding(original, edits)

    def override(embedding):
        return torch.from_numpy(np.ascontiguousarray(embedding)).float().unsqueeze(0)

    wav_orig, _ = synthesize(model, utt, prosody_override=override(original))
    wav_edit, _ = synthesize(model, utt, prosody_override=override(edited))

    artifacts = {}
    for name, wav in (("original", wav_orig), ("edited", wav_edit)):
        wav_path = out_dir / f"{name}.wav"
        dsp.write_wav(wav_path, wav)
        artifacts[f"{name}_wav"] = str(wav_path)
        spec = dsp.linear_to_scaled(dsp.stft(wav))
        img = out_dir / f"{name}_spectrogram.png"
        _save_spectrogram_image(spec, img, f"{utt.id} {name}")
        artifacts[f"{name}_spectrogram"] = str(img)

    fig, ax = plt.subplots(figsize=(8, 3))
    for d in range(original.shape[1]):
        ax.plot(original[:, d], label=f"dim {d}")
        ax.plot(edited[:, d], linestyle="--", label=f"dim {d} edited")
    ax.set_xlabel("embedding step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    emb_png = out_dir / "embedding.png"
    fig.savefig(emb_png, dpi=100)
    plt.close(fig)
    artifacts["embedding_plot"] = str(emb_png)
    save_embedding_csv(out_dir / "embedding_original.csv", original)
    save_embedding_csv(out_dir / "embedding_edited.csv", edited)

    tracks = {}
    for name, wav in (("original", wav_orig), ("edited", wav_edit)):
        pitch = dsp.estimate_pitch_track(wav)
        energy = dsp.frame_energy_track(wav)
        _save_track_csv(out_dir / f"{name}_pitch.csv", "frame,pitch_hz", pitch)
        _save_track_csv(out_dir / f"{name}_energy.csv", "frame,rms", energy)
        artifacts[f"{name}_pitch"] = str(out_dir / f"{name}_pitch.csv")
        artifacts[f"{name}_energy"] = str(out_dir / f"{name}_energy.csv")
        voiced = pitch[pitch > 0]
        tracks[name] = {
            "mean_pitch_hz": float(voiced.mean()) if voiced.size else 0.0,
            "pitch_variance": float(voiced.var()) if voiced.size else 0.0,
            "mean_energy": float(energy.mean()) if energy.size else 0.0,
        }
    shift = tracks["edited"]["mean_pitch_hz"] - tracks["original"]["mean_pitch_hz"]
    return _report(
        "control", {utt.id: shift}, cfg,
        metrics={"step": step, "edit_spec": edit_spec, **{
            f"{name}_{k}": v for name, stats in tracks.items() for k, v in stats.items()
        }},
        artifacts=artifacts,
    )


# ---------------------------------------------------------------------------
# attention maps


def _resample_rows(matrix: np.ndarray, n_rows: int) -> np.ndarray:
    """Linear interpolation along axis 0 to n_rows rows."""
    if matrix.shape[0] == n_rows:
        return matrix
    src = np.linspace(0.0, 1.0, matrix.shape[0])
    dst = np.linspace(0.0, 1.0, n_rows)
    return np.stack([np.interp(dst, src, matrix[:, j]) for j in range(matrix.shape[1])], axis=1)


def alignment_similarity(alpha: np.ndarray, beta: np.ndarray) -> float:
    """Pearson correlation between the decoder map [l_d x l_e] and the
    reference map [l_e x l_ref'] after resampling the reference axis of the
    transposed beta to decoder steps."""
    resampled = _resample_rows(beta.T, alpha.shape[0])  # [l_d x l_e]
    a = alpha.ravel()
    b = resampled.ravel()
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def _save_attention_csv(path: Path, matrix: np.ndarray) -> None:
    sums = matrix.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ContractError("attention rows must sum to 1")
    rows = [",".join(f"{v:.8f}" for v in row) for row in matrix]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def plot_attention(checkpoint_path, manifest_path, utterance_id: str, out_dir,
                   include_reference: bool | None = None) -> ExperimentReport:
    """Emit the decoder alignment map, and for the text-side variant also the
    reference alignment map plus their similarity score."""
    model, cfg, utterances, step = load_for_eval(checkpoint_path, manifest_path)
    if include_reference is None:
        include_reference = cfg.variant == "text_side"
    if include_reference and cfg.variant != "text_side":
        raise ContractError(
            f"reference alignment map is unsupported for the {cfg.variant} variant"
        )
    utt = select_utterances(utterances, utterance_ids=[utterance_id])[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    _, out = synthesize(model, utt)
    alpha = out["alpha"].numpy()
    artifacts = {}
    _save_attention_csv(out_dir / "alpha.csv", alpha)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.imshow(alpha, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xlabel("text position")
    ax.set_ylabel("decoder step")
    fig.tight_layout()
    fig.savefig(out_dir / "alpha.png", dpi=100)
    plt.close(fig)
    artifacts["alpha_csv"] = str(out_dir / "alpha.csv")
    artifacts["alpha_png"] = str(out_dir / "alpha.png")

    metrics = {"step": step}
    notes = []
    if include_reference:
        beta = out["beta"].numpy()
        _save_attention_csv(out_dir / "beta.csv", beta)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.imshow(beta, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xlabel("reference step")
        ax.set_ylabel("text position")
        fig.tight_layout()
        fig.savefig(out_dir / "beta.png", dpi=100)
        plt.close(fig)
        artifacts["beta_csv"] = str(out_dir / "beta.csv")
        artifacts["beta_png"] = str(out_dir / "beta.png")
        score = alignment_similarity(alpha, beta)
        metrics["alignment_similarity"] = None if np.isnan(score) else score
        if np.isnan(score):
            notes.append("similarity undefined: an alignment map is constant")
        per = {utt.id: 0.0 if np.isnan(score) else score}
    else:
        per = {utt.id: 0.0}
        notes.append("decoder alignment only; no reference attention in this variant")
    return _report("plot_attention", per, cfg,
                   metrics=metrics, notes=notes, artifacts=artifacts)


# ---------------------------------------------------------------------------
# melody synthesis and contour transfer

MELODY_NOTE_FRAMES = (10, 18)
MELODY_DEGREES = (0, 2, 4, 7, 9, 12, 14, 16)  # pentatonic-ish, wide range


def make_melodies(out_dir, n_melodies=5, seed=100, n_frames=192) -> Path:
    """Synthetic sung melodies: sustained vowels with stepwise note contours.

    Emitted in corpus layout (manifest + wav + oracle) so the standard loader
    applies; oracle pitch is the note contour itself.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "oracle").mkdir(parents=True, exist_ok=True)
    profile = corpus_mod.SpeakerProfile(1.0, -0.2)
    lines = []
    for idx in range(n_melodies):
        rng = np.random.default_rng([seed, idx])
        vowels = rng.integers(2, corpus_mod.VOCAB_SIZE, 3)
        phonemes = corpus_mod.PhonemeSequence(
            np.concatenate([np.repeat(vowels, 2), [corpus_mod.EOS_ID]])
        )
        gen_seed = int(np.random.SeedSequence([seed, idx, 1]).generate_state(1)[0])
        ends = corpus_mod.segment_boundaries(
            len(phonemes), n_frames, np.random.default_rng(gen_seed)
        )
        eos_start = int(ends[-2])

        pitch = np.zeros(n_frames)
        amplitude = np.zeros(n_frames)
        t = 0
        root = corpus_mod.BASE_PITCH_HZ
        while t < eos_start:
            dur = min(int(rng.integers(*MELODY_NOTE_FRAMES)), eos_start - t)
            degree = int(rng.choice(MELODY_DEGREES))
            pitch[t : t + dur] = root * 2.0 ** (degree / 12.0)
            amplitude[t : t + dur] = 0.9
            t += dur
        track = corpus_mod.ProsodyTrack(np.clip(pitch, 0.0, 520.0), amplitude)
        wave = corpus_mod.generate_synthetic_utterance(phonemes, track, profile, gen_seed)

        uid = f"m{idx:04d}"
        dsp.write_wav(out_dir / "wav" / f"{uid}.wav", wave)
        rows = [f"{i},{track.pitch[i]:.6f},{track.amplitude[i]:.6f}" for i in range(n_frames)]
        (out_dir / "oracle" / f"{uid}.csv").write_text(
            "frame_index,pitch_hz,amplitude\n" + "\n".join(rows) + "\n", encoding="utf-8"
        )
        ids_text = " ".join(str(int(p)) for p in phonemes.ids)
        lines.append(f"{uid}|0|{ids_text}|wav/{uid}.wav")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def contour_transfer(checkpoint_path, melody_manifest, melody_id: str,
                     lyrics_ids, speaker_id: int, out_dir=None) -> ExperimentReport:
    """Sing the lyrics: prosody from a melody recording, text and speaker
    substituted. Reports the correlation between the melody's oracle pitch
    contour and the output pitch track."""
    model, _, step, cfg = load_checkpoint(checkpoint_path)
    model.eval()
    melodies = corpus_mod.load_manifest(melody_manifest, n_speakers=None)
    melody = select_utterances(melodies, utterance_ids=[melody_id])[0]
    if melody.oracle is None:
        raise ContractError(f"{melody_id}: melody oracle contour is required")
    lyrics = corpus_mod.PhonemeSequence(np.asarray(lyrics_ids, dtype=np.int64))

    ids = torch.from_numpy(lyrics.ids)
    notes = []
    if cfg.variant == "baseline":
        out = model.synthesize(ids, speaker_id=speaker_id)
        notes.append("baseline variant ignores the melody entirely")
    else:
        reference = reference_tensor(melody, cfg.r)
        out = model.synthesize(ids, speaker_id=speaker_id, reference_mel=reference)
    wav = model.waveform_from_linear(out["linear"])

    out_pitch = dsp.estimate_pitch_track(wav)
    source = melody.oracle.pitch
    if len(out_pitch) != len(source):
        notes.append(
            f"length mismatch: melody {len(source)} frames, output {len(out_pitch)}; truncated"
        )
    t = min(len(out_pitch), len(source))
    a, b = source[:t], out_pitch[:t]
    voiced = (a > 0) & (b > 0)
    if voiced.sum() >= 8 and a[voiced].std() > 0 and b[voiced].std() > 0:
        corr = float(np.corrcoef(a[voiced], b[voiced])[0, 1])
    else:
        corr = 0.0
        notes.append("too few mutually voiced frames for a correlation")

    artifacts = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        wav_path = out_dir / f"sung_{melody_id}_s{speaker_id}.wav"
        dsp.write_wav(wav_path, wav)
        _save_track_csv(out_dir / f"sung_{melody_id}_pitch.csv", "frame,pitch_hz", out_pitch)
        artifacts["wav"] = str(wav_path)
        artifacts["pitch_csv"] = str(out_dir / f"sung_{melody_id}_pitch.csv")

    return _report(
        "contour_transfer", {melody.id: corr}, cfg,
        metrics={"step": step, "speaker_id": speaker_id,
                 "voiced_frames": int(voiced.sum())},
        notes=notes, artifacts=artifacts,
    )


def eval_mcd(reference_wav, generated_wav) -> float:
    return dsp.mcd_between_waveforms(dsp.read_wav(reference_wav), dsp.read_wav(generated_wav))
