"""Signal-processing kernels: STFT, mel analysis, Griffin-Lim, MFCC, MCD.

Everything here is a pure function of its inputs. Audio is 16 kHz mono
throughout; analysis uses a 50 ms Hann window, 12.5 ms hop, 1024-point FFT
and an 80-band triangular mel filterbank spanning 0-8000 Hz.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

from .errors import ContractError

SAMPLE_RATE = 16000
WIN_LENGTH = 800
HOP_LENGTH = 200
FFT_SIZE = 1024
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-5
LOG_FLOOR_LOG = math.log(LOG_FLOOR)
MCD_NUM_COEFFS = 13

# Reported alongside every MCD figure: c0 excluded, no 10*sqrt(2)/ln10 scaling,
# length mismatches resolved by truncation to the shorter sequence.
MCD_CONVENTION = "mcd13-unscaled-c1..c13-truncate"


@dataclass(frozen=True)
class Waveform:
    """Mono audio at a fixed sample rate, nominal range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.ndim != 1:
            raise ContractError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ContractError("waveform contains NaN/Inf samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class LinearSpectrogram:
    """Magnitude spectrogram, frames along axis 0."""

    frames: np.ndarray
    frame_hop: int = HOP_LENGTH
    fft_size: int = FFT_SIZE

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2:
            raise ContractError(f"spectrogram must be [T x F], got shape {frames.shape}")
        if frames.shape[1] != self.fft_size // 2 + 1:
            raise ContractError(
                f"expected {self.fft_size // 2 + 1} frequency bins, got {frames.shape[1]}"
            )
        if not np.all(np.isfinite(frames)):
            raise ContractError("spectrogram contains NaN/Inf entries")
        if np.any(frames < 0):
            raise ContractError("magnitude spectrogram has negative entries")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-magnitude mel spectrogram, frames along axis 0."""

    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ContractError(f"mel spectrogram must be [T x M] with T >= 1, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ContractError("mel spectrogram contains NaN/Inf entries")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class CepstrumSequence:
    """MFCC coefficients c1..c13 per frame (energy term c0 excluded)."""

    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2 or frames.shape[1] != MCD_NUM_COEFFS:
            raise ContractError(f"cepstrum must be [T x {MCD_NUM_COEFFS}], got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ContractError("cepstrum contains NaN/Inf entries")


def hann_window(win_length: int) -> np.ndarray:
    """Periodic Hann window (COLA-compatible at hop = win/4)."""
    n = np.arange(win_length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)


def num_frames(n_samples: int, win_length: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    if n_samples < win_length:
        raise ContractError(f"signal length {n_samples} shorter than one window ({win_length})")
    return 1 + (n_samples - win_length) // hop


def _frame(samples: np.ndarray, win_length: int, hop: int) -> np.ndarray:
    t = num_frames(len(samples), win_length, hop)
    idx = np.arange(win_length)[None, :] + hop * np.arange(t)[:, None]
    return samples[idx]


def stft_complex(
    w: Waveform,
    win_length: int = WIN_LENGTH,
    hop: int = HOP_LENGTH,
    fft_size: int = FFT_SIZE,
) -> np.ndarray:
    """Complex one-sided STFT, shape [T x fft_size/2+1]."""
    if win_length > fft_size:
        raise ContractError(f"win_length {win_length} exceeds fft_size {fft_size}")
    if hop > win_length:
        raise ContractError(f"hop {hop} exceeds win_length {win_length}")
    frames = _frame(w.samples, win_length, hop) * hann_window(win_length)
    return np.fft.rfft(frames, n=fft_size, axis=1)


def stft(
    w: Waveform,
    win_length: int = WIN_LENGTH,
    hop: int = HOP_LENGTH,
    fft_size: int = FFT_SIZE,
) -> LinearSpectrogram:
    """Magnitude STFT with T = 1 + floor((len - win)/hop) frames."""
    spec = np.abs(stft_complex(w, win_length, hop, fft_size))
    return LinearSpectrogram(spec, frame_hop=hop, fft_size=fft_size)


def istft(
    spec: np.ndarray,
    win_length: int = WIN_LENGTH,
    hop: int = HOP_LENGTH,
    fft_size: int = FFT_SIZE,
) -> Waveform:
    """Weighted overlap-add inverse of `stft_complex`.

    Output length is win_length + (T-1)*hop; samples the window never
    covers with significant weight come out as zero.
    """
    spec = np.asarray(spec)
    t = spec.shape[0]
    window = hann_window(win_length)
    frames = np.fft.irfft(spec, n=fft_size, axis=1)[:, :win_length]
    length = win_length + (t - 1) * hop
    out = np.zeros(length)
    norm = np.zeros(length)
    wsq = window * window
    for i in range(t):
        start = i * hop
        out[start : start + win_length] += frames[i] * window
        norm[start : start + win_length] += wsq
    out = np.where(norm > 1e-10, out / np.maximum(norm, 1e-10), 0.0)
    return Waveform(out)


def mel_filterbank(
    n_mels: int = N_MELS,
    fft_size: int = FFT_SIZE,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> np.ndarray:
    """Triangular mel filterbank matrix [n_mels x fft_size/2+1], peak gain 1."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    weights = np.zeros((n_mels, fft_size // 2 + 1))
    for m in range(n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_freqs - lo) / max(center - lo, 1e-10)
        down = (hi - bin_freqs) / max(hi - center, 1e-10)
        weights[m] = np.clip(np.minimum(up, down), 0.0, None)
    return weights


_MEL_BASIS = None


def _mel_basis() -> np.ndarray:
    global _MEL_BASIS
    if _MEL_BASIS is None:
        _MEL_BASIS = mel_filterbank()
    return _MEL_BASIS


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    """80-band log mel spectrogram: log(max(mel @ |STFT|, 1e-5))."""
    if w.sample_rate != SAMPLE_RATE:
        raise ContractError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
    mags = stft(w).frames
    mel = mags @ _mel_basis().T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)))


def scale_log(log_frames: np.ndarray) -> np.ndarray:
    """Map log magnitudes so the silence floor is 0 and magnitude 1 is 1."""
    return (log_frames - LOG_FLOOR_LOG) / (-LOG_FLOOR_LOG)


def unscale_log(scaled: np.ndarray) -> np.ndarray:
    return scaled * (-LOG_FLOOR_LOG) + LOG_FLOOR_LOG


def linear_to_scaled(spec: LinearSpectrogram) -> np.ndarray:
    return scale_log(np.log(np.maximum(spec.frames, LOG_FLOOR)))


def scaled_to_linear(scaled: np.ndarray) -> LinearSpectrogram:
    return LinearSpectrogram(np.exp(unscale_log(np.asarray(scaled, dtype=np.float64))))


def griffin_lim(
    spec: LinearSpectrogram, iterations: int = 60, momentum: float = 0.9
) -> Waveform:
    """Iterative phase reconstruction from a magnitude spectrogram.

    Phase starts at zero; each iteration re-analyzes the current signal and
    keeps its phase while restoring the target magnitudes. The accelerated
    update extrapolates between consecutive iterates (momentum 0 gives the
    plain alternating projection). Deterministic.
    """
    if iterations < 0:
        raise ContractError(f"iterations must be >= 0, got {iterations}")
    if not 0.0 <= momentum < 1.0:
        raise ContractError(f"momentum must be in [0, 1), got {momentum}")
    mags = spec.frames
    win, hop, fft_size = WIN_LENGTH, spec.frame_hop, spec.fft_size
    rebuilt = mags.astype(np.complex128)
    previous = None
    for _ in range(iterations):
        extrapolated = rebuilt if previous is None else rebuilt + momentum * (rebuilt - previous)
        analyzed = stft_complex(istft(extrapolated, win, hop, fft_size), win, hop, fft_size)
        phase = analyzed / np.maximum(np.abs(analyzed), 1e-12)
        previous = rebuilt
        rebuilt = mags * phase
    return istft(rebuilt, win, hop, fft_size)


def mfcc(spec: MelSpectrogram) -> CepstrumSequence:
    """First 13 MFCCs per frame via orthonormal DCT-II; c0 is dropped."""
    n_channels = spec.frames.shape[1]
    if n_channels < MCD_NUM_COEFFS + 1:
        raise ContractError(
            f"need >= {MCD_NUM_COEFFS + 1} mel channels for {MCD_NUM_COEFFS} coefficients, "
            f"got {n_channels}"
        )
    coeffs = dct(spec.frames, type=2, axis=1, norm="ortho")
    return CepstrumSequence(coeffs[:, 1 : MCD_NUM_COEFFS + 1])


def mcd(ref: CepstrumSequence, gen: CepstrumSequence) -> float:
    """Mean over frames of the Euclidean distance between c1..c13.

    Sequences of different length are truncated to the shorter one.
    """
    if ref.frames.shape[0] == 0 or gen.frames.shape[0] == 0:
        raise ContractError("MCD requires nonempty cepstrum sequences")
    t = min(ref.frames.shape[0], gen.frames.shape[0])
    diff = ref.frames[:t] - gen.frames[:t]
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def mcd_between_waveforms(ref: Waveform, gen: Waveform) -> float:
    return mcd(mfcc(mel_spectrogram(ref)), mfcc(mel_spectrogram(gen)))


# ---------------------------------------------------------------------------
# Pitch / energy tracking (used by the evaluation protocols)

PITCH_WIN = 400  # 25 ms
PITCH_FMIN = 60.0
PITCH_FMAX = 600.0


def estimate_pitch_track(
    w: Waveform,
    hop: int = HOP_LENGTH,
    fmin: float = PITCH_FMIN,
    fmax: float = PITCH_FMAX,
    voicing_threshold: float = 0.6,
) -> np.ndarray:
    """Per-frame pitch in Hz via normalized autocorrelation; 0 where unvoiced.

    25 ms analysis windows; candidate lags within 1% of the best are resolved
    toward the shortest lag to avoid subharmonic picks, then refined by
    parabolic interpolation. A 3-point median filter removes isolated blips.
    """
    x = w.samples
    sr = w.sample_rate
    win = PITCH_WIN
    if len(x) < win:
        return np.zeros(0)
    lag_min = max(2, int(sr / fmax))
    lag_max = min(win - 8, int(math.ceil(sr / fmin)))
    t = 1 + (len(x) - win) // hop
    pitch = np.zeros(t)
    n_fft = 1
    while n_fft < 2 * win:
        n_fft *= 2
    for i in range(t):
        seg = x[i * hop : i * hop + win]
        if np.sqrt(np.mean(seg * seg)) < 1e-4:
            continue
        spec = np.fft.rfft(seg, n_fft)
        ac = np.fft.irfft(spec * np.conj(spec))[: lag_max + 2]
        cum = np.concatenate([[0.0], np.cumsum(seg * seg)])
        lags = np.arange(lag_min, lag_max + 1)
        e_head = cum[win - lags]
        e_tail = cum[win] - cum[lags]
        nr = ac[lag_min : lag_max + 1] / np.sqrt(np.maximum(e_head * e_tail, 1e-20))
        best = float(np.max(nr))
        if best < voicing_threshold:
            continue
        candidates = np.where(nr >= best - 0.01)[0]
        k = int(candidates[0])
        lag = lag_min + k
        # parabolic refinement around the peak
        if 0 < k < len(nr) - 1:
            denom = nr[k - 1] - 2 * nr[k] + nr[k + 1]
            if abs(denom) > 1e-12:
                lag = lag + 0.5 * (nr[k - 1] - nr[k + 1]) / denom
        pitch[i] = sr / lag
    # median-3 over voiced runs
    if t >= 3:
        smoothed = pitch.copy()
        for i in range(1, t - 1):
            trio = pitch[i - 1 : i + 2]
            if np.all(trio > 0):
                smoothed[i] = np.median(trio)
        pitch = smoothed
    return pitch


def frame_energy_track(w: Waveform, win: int = PITCH_WIN, hop: int = HOP_LENGTH) -> np.ndarray:
    """Per-frame RMS energy with the pitch tracker's framing."""
    x = w.samples
    if len(x) < win:
        return np.zeros(0)
    frames = _frame(x, win, hop)
    return np.sqrt(np.mean(frames * frames, axis=1))


def mean_pitch(w: Waveform) -> float:
    """Mean pitch over voiced frames; 0 if nothing is voiced."""
    track = estimate_pitch_track(w)
    voiced = track[track > 0]
    return float(np.mean(voiced)) if voiced.size else 0.0


# ---------------------------------------------------------------------------
# File I/O

def write_wav(path, w: Waveform) -> None:
    """16-bit little-endian PCM mono WAV."""
    quantized = np.clip(np.round(w.samples * 32768.0), -32768, 32767)
    wavfile.write(str(path), w.sample_rate, quantized.astype("<i2"))


def read_wav(path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ContractError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype != np.int16:
        raise ContractError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return Waveform(data.astype(np.float64) / 32768.0, sample_rate=rate)


def save_spectrogram(spec: LinearSpectrogram, path) -> None:
    """Row-major float32 dump with a text sidecar header at <path>.hdr."""
    path = Path(path)
    spec.frames.astype("<f4").tofile(path)
    rows, cols = spec.frames.shape
    header = f"rows={rows}\ncols={cols}\nhop={spec.frame_hop}\nfft_size={spec.fft_size}\n"
    path.with_suffix(path.suffix + ".hdr").write_text(header)


def load_spectrogram(path) -> LinearSpectrogram:
    path = Path(path)
    header_path = path.with_suffix(path.suffix + ".hdr")
    fields = {}
    for line in header_path.read_text().splitlines():
        if line.strip():
            key, value = line.split("=", 1)
            fields[key.strip()] = int(value)
    frames = np.fromfile(path, dtype="<f4").reshape(fields["rows"], fields["cols"])
    return LinearSpectrogram(frames, frame_hop=fields["hop"], fft_size=fields["fft_size"])
