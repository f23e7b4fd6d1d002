"""Waveform types, WAV file I/O, synthetic dataset generation, and log-mel features.

All audio is fixed-length mono with real-valued samples in [-1, 1].
Quantization to 16-bit PCM happens only at file boundaries; everything
in memory stays continuous so losses and gradients are well defined.
"""

from __future__ import annotations

import hashlib
import struct
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, UnsupportedFormatError

# STFT / mel parameters are fixed so features are deterministic across runs.
MEL_WINDOW = 256
MEL_HOP = 128
N_MELS = 40
LOG_FLOOR = 1e-10


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class AudioClip:
    """A fixed-length mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ContractError("clip samples must be a non-empty 1-D array")
        if not np.all(np.isfinite(arr)):
            raise ContractError("clip samples must be finite")
        if np.max(np.abs(arr)) > 1.0:
            raise ContractError("clip samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ContractError("sample_rate must be positive")
        object.__setattr__(self, "samples", _readonly(arr))

    @property
    def d_x(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class Dataset:
    """A homogeneous collection of clips, stored as one (n, d_x) matrix.

    ``content_hash`` is a SHA-256 digest over the raw sample bytes and the
    sample rate, so identical contents always hash identically and keys can
    be bound to the exact data they were trained against.
    """

    matrix: np.ndarray
    sample_rate: int
    source_tag: str
    content_hash: str = field(default="")

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] == 0:
            raise ContractError("dataset must contain at least one clip")
        if not np.all(np.isfinite(mat)) or np.max(np.abs(mat)) > 1.0:
            raise ContractError("dataset samples must be finite and in [-1, 1]")
        object.__setattr__(self, "matrix", _readonly(mat))
        if not self.content_hash:
            object.__setattr__(self, "content_hash", hash_samples(mat, self.sample_rate))

    @property
    def n_clips(self) -> int:
        return self.matrix.shape[0]

    @property
    def d_x(self) -> int:
        return self.matrix.shape[1]

    def clip(self, index: int) -> AudioClip:
        return AudioClip(self.matrix[index], self.sample_rate)

    def clips(self) -> list[AudioClip]:
        return [self.clip(i) for i in range(self.n_clips)]


@dataclass(frozen=True)
class MelParams:
    window: int = MEL_WINDOW
    hop: int = MEL_HOP
    n_mels: int = N_MELS
    sample_rate: int = 16000


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel energy frames, shape (n_frames, n_mels)."""

    frames: np.ndarray
    params: MelParams

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", _readonly(self.frames))


def hash_samples(matrix: np.ndarray, sample_rate: int) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<qqi", matrix.shape[0], matrix.shape[1], sample_rate))
    h.update(np.ascontiguousarray(matrix, dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# WAV I/O (RIFF/WAVE, PCM tag 1, 16-bit mono, little-endian)
# ---------------------------------------------------------------------------


def _read_wav_handle(handle, label: str) -> AudioClip:
    try:
        with wave.open(handle, "rb") as wf:
            nchannels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            comptype = wf.getcomptype()
            sample_rate = wf.getframerate()
            nframes = wf.getnframes()
            raw = wf.readframes(nframes)
    except (wave.Error, EOFError, struct.error) as exc:
        raise FormatError(f"{label}: not a valid WAV file ({exc})") from exc
    if comptype != "NONE":
        raise UnsupportedFormatError(f"{label}: compressed WAV not supported")
    if nchannels != 1:
        raise UnsupportedFormatError(f"{label}: expected mono, got {nchannels} channels")
    if sampwidth != 2:
        raise UnsupportedFormatError(f"{label}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    if len(raw) != 2 * nframes:
        raise FormatError(f"{label}: truncated sample data")
    if nframes == 0:
        raise FormatError(f"{label}: empty WAV file")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, sample_rate)


def read_wav(path: str | Path) -> AudioClip:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1] by 1/32768."""

    with open(path, "rb") as fh:
        return _read_wav_handle(fh, str(path))


def read_wav_bytes(data: bytes, label: str = "<bytes>") -> AudioClip:
    """Read a 16-bit PCM mono WAV from an in-memory buffer."""

    import io

    return _read_wav_handle(io.BytesIO(data), label)


def _quantize(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")


def write_wav(clip: AudioClip, path: str | Path) -> None:
    """Write a clip as 16-bit PCM mono WAV.

    Samples are quantized as round(s * 32768) clamped to the int16 range,
    the symmetric counterpart of read_wav's division by 32768: the
    round trip then changes no sample by more than 1/32768.
    """

    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(_quantize(clip.samples).tobytes())


def write_wav_bytes(clip: AudioClip) -> bytes:
    """Encode a clip as 16-bit PCM mono WAV in memory."""

    import io

    buffer = io.BytesIO()
    with wave.open(buffer, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(_quantize(clip.samples).tobytes())
    return buffer.getvalue()


def ingest_wav_dir(path: str | Path) -> Dataset:
    """Load a flat directory of WAV files as a dataset.

    Lexicographic filename order defines the clip index. All files must share
    the same length and sample rate.
    """

    wav_paths = sorted(Path(path).glob("*.wav"), key=lambda p: p.name)
    if not wav_paths:
        raise FormatError(f"{path}: no .wav files found")
    clips = [read_wav(p) for p in wav_paths]
    d_x = clips[0].d_x
    rate = clips[0].sample_rate
    for p, c in zip(wav_paths, clips):
        if c.d_x != d_x:
            raise ContractError(f"{p.name}: length {c.d_x} != {d_x} of first clip")
        if c.sample_rate != rate:
            raise ContractError(f"{p.name}: sample rate {c.sample_rate} != {rate}")
    matrix = np.stack([c.samples for c in clips])
    return Dataset(matrix, rate, source_tag="wav-dir")


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------


def shaped_noise(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with power spectral density proportional to f**alpha.

    White Gaussian noise is shaped in the frequency domain by |f|**(alpha/2)
    with the DC bin zeroed, then transformed back. Not normalized.
    """

    if n < 2:
        raise ContractError("noise length must be >= 2")
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    shaping = np.zeros_like(freqs)
    nonzero = freqs > 0
    shaping[nonzero] = freqs[nonzero] ** (alpha / 2.0)
    return np.fft.irfft(spectrum * shaping, n=n)


def _envelope(d_x: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    # Linear attack to full level, then exponential decay.
    t = np.arange(d_x) / sample_rate
    duration = d_x / sample_rate
    attack = rng.uniform(0.05, 0.3) * duration
    decay_rate = rng.uniform(0.5, 4.0) / duration
    env = np.minimum(t / attack, 1.0) * np.exp(-decay_rate * np.maximum(t - attack, 0.0))
    return env


def synth_clip(d_x: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """One harmonic tone burst over a pink-noise floor, peak-normalized to 0.9."""

    f0 = rng.uniform(80.0, 400.0)
    n_harmonics = int(rng.integers(3, 9))
    t = np.arange(d_x) / sample_rate
    signal = np.zeros(d_x)
    for k in range(1, n_harmonics + 1):
        amp = rng.uniform(0.3, 1.0) / k
        phase = rng.uniform(0.0, 2.0 * np.pi)
        signal += amp * np.sin(2.0 * np.pi * f0 * k * t + phase)
    signal *= _envelope(d_x, sample_rate, rng)

    noise = shaped_noise(d_x, -1.0, rng)
    signal_power = float(np.mean(signal**2))
    noise_power = float(np.mean(noise**2))
    if noise_power > 0.0:
        # Pink floor 30 dB below the tone's power.
        noise *= np.sqrt(signal_power * 1e-3 / noise_power)
    mix = signal + noise
    return 0.9 * mix / np.max(np.abs(mix))


def synth_dataset(n: int, d_x: int, sample_rate: int, seed: int) -> Dataset:
    """Deterministically synthesize ``n`` harmonic clips of length ``d_x``."""

    if n < 1:
        raise ContractError("n must be >= 1")
    if d_x < 64:
        raise ContractError("d_x must be >= 64")
    rng = np.random.default_rng(seed)
    matrix = np.stack([synth_clip(d_x, sample_rate, rng) for _ in range(n)])
    return Dataset(matrix, sample_rate, source_tag="synthetic")


# ---------------------------------------------------------------------------
# Log-mel spectrogram
# ---------------------------------------------------------------------------


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, window: int = MEL_WINDOW, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, window // 2 + 1)."""

    freqs = np.fft.rfftfreq(window, d=1.0 / sample_rate)
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = np.asarray(mel_to_hz(mel_points))
    filters = np.zeros((n_mels, freqs.shape[0]))
    for k in range(n_mels):
        lo, center, hi = hz_points[k], hz_points[k + 1], hz_points[k + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        filters[k] = np.clip(np.minimum(rising, falling), 0.0, None)
    return filters


def frame_count(d_x: int, window: int = MEL_WINDOW, hop: int = MEL_HOP) -> int:
    return (d_x - window) // hop + 1


def mel_frames(matrix: np.ndarray, sample_rate: int,
               window: int = MEL_WINDOW, hop: int = MEL_HOP,
               n_mels: int = N_MELS) -> np.ndarray:
    """Batched log-mel features for a (n, d_x) sample matrix.

    Returns shape (n, n_frames, n_mels). Hann-windowed power spectra are
    pooled through triangular mel filters and floored before the log.
    """

    n, d_x = matrix.shape
    if d_x < window:
        raise ContractError(f"clip length {d_x} shorter than analysis window {window}")
    n_frames = frame_count(d_x, window, hop)
    hann = np.hanning(window)
    starts = np.arange(n_frames) * hop
    # (n, n_frames, window) view over the sample matrix
    segments = np.stack([matrix[:, s:s + window] for s in starts], axis=1) * hann
    power = np.abs(np.fft.rfft(segments, axis=-1)) ** 2
    filters = mel_filterbank(sample_rate, window, n_mels)
    energies = power @ filters.T
    return np.log(energies + LOG_FLOOR)


def mel_spectrogram(clip: AudioClip, window: int = MEL_WINDOW, hop: int = MEL_HOP,
                    n_mels: int = N_MELS) -> MelSpectrogram:
    """Log-mel spectrogram of a single clip."""

    frames = mel_frames(clip.samples[None, :], clip.sample_rate, window, hop, n_mels)[0]
    params = MelParams(window=window, hop=hop, n_mels=n_mels, sample_rate=clip.sample_rate)
    return MelSpectrogram(frames, params)
