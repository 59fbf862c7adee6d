"""Waveform <-> spectrogram conversion and the preprocessing recipe.

All spectral math runs in 64-bit floats. The analysis/synthesis pair is a
sine window at 75% overlap, which satisfies the constant-overlap-add
condition for its square, so the ISTFT divides by the summed squared
window and inverts the STFT exactly on covered samples.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import InputTooShortError

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    """Mono waveform; samples nominally in [-1, 1] after rescale()."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise ValueError("waveform is empty")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis geometry: 64 ms sine window, 256-sample shift at 16 kHz."""

    window_len: int = 1024
    hop: int = 256
    window_kind: str = "sine"

    def __post_init__(self):
        if self.window_kind != "sine":
            raise ValueError(f"unsupported window kind: {self.window_kind!r}")
        if self.window_len <= 0 or self.hop <= 0:
            raise ValueError("window_len and hop must be positive")
        if self.window_len % self.hop != 0:
            raise ValueError(
                f"hop ({self.hop}) must divide window_len ({self.window_len})"
            )
        if self.window_len % 2 != 0:
            raise ValueError("window_len must be even")

    @property
    def n_freq(self) -> int:
        """Number of non-negative frequency bins (window_len/2 + 1)."""
        return self.window_len // 2 + 1

    def to_dict(self) -> dict:
        return {
            "window_len": self.window_len,
            "hop": self.hop,
            "window_kind": self.window_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        return cls(**d)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """F x T complex STFT coefficients plus the geometry that produced them."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D (F, T), got {data.shape}")
        if data.shape[0] != self.config.n_freq:
            raise ValueError(
                f"expected {self.config.n_freq} frequency rows, got {data.shape[0]}"
            )
        if data.shape[1] < 1:
            raise ValueError("spectrogram must have at least one frame")
        if not np.all(np.isfinite(data)):
            raise ValueError("spectrogram contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def sine_window(n: int) -> np.ndarray:
    """w[k] = sin(pi*(k+0.5)/n); its square overlap-adds to a constant at 75%."""
    return np.sin(np.pi * (np.arange(n) + 0.5) / n)


def stft(w: Waveform, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Sine-windowed STFT without padding.

    Frame t covers samples [t*hop, t*hop + window_len); only non-negative
    frequencies are kept, so F = window_len/2 + 1.
    """
    n = config.window_len
    hop = config.hop
    x = w.samples
    if x.size < n:
        raise InputTooShortError(
            f"input too short: {x.size} samples < one window ({n})"
        )
    n_frames = (x.size - n) // hop + 1
    win = sine_window(n)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(n)[None, :]
    frames = x[idx] * win[None, :]
    data = np.fft.rfft(frames, n=n, axis=1).T  # (F, T)
    return ComplexSpectrogram(data=data, config=config)


ENVELOPE_FLOOR = 0.1


def istft(s: ComplexSpectrogram) -> Waveform:
    """Overlap-add inverse with the sine synthesis window.

    The accumulated signal is divided by the summed squared window, which
    makes istft(stft(w)) exact (up to rounding) wherever the envelope
    reaches ENVELOPE_FLOOR; below it (the outermost few dozen samples,
    where only one window tail contributes) the divisor is floored instead.
    An unfloored division would amplify those samples by up to 1/win^2[0]
    (~1e5) for spectrograms that are not exact STFTs of any waveform, which
    is every spectrogram a spectral filter has touched. Output length is
    hop*(T-1) + window_len.
    """
    cfg = s.config
    n, hop = cfg.window_len, cfg.hop
    n_frames = s.n_frames
    win = sine_window(n)
    frames = np.fft.irfft(s.data.T, n=n, axis=1) * win[None, :]
    out_len = hop * (n_frames - 1) + n
    out = np.zeros(out_len)
    env = np.zeros(out_len)
    for t in range(n_frames):
        out[t * hop : t * hop + n] += frames[t]
        env[t * hop : t * hop + n] += win ** 2
    out /= np.maximum(env, ENVELOPE_FLOOR)
    return Waveform(samples=out, sample_rate=DEFAULT_SAMPLE_RATE)


def power(s: ComplexSpectrogram) -> np.ndarray:
    """Element-wise squared modulus, shape (F, T)."""
    return np.abs(s.data) ** 2


def vad_trim(w: Waveform, threshold_db: float = 30.0, frame_len: int = 1024) -> Waveform:
    """Drop leading/trailing low-activity frames.

    Non-overlapping frames are compared by mean-square power; frames more
    than threshold_db below the loudest frame are removed from the edges
    only. The loudest frame always survives, so output is never empty.
    """
    x = w.samples
    n_frames = int(np.ceil(x.size / frame_len))
    energy = np.empty(n_frames)
    for i in range(n_frames):
        seg = x[i * frame_len : (i + 1) * frame_len]
        energy[i] = np.mean(seg ** 2)
    peak = energy.max()
    if peak == 0.0:
        return w
    keep = energy >= peak * 10.0 ** (-threshold_db / 10.0)
    first = int(np.argmax(keep))
    last = int(len(keep) - 1 - np.argmax(keep[::-1]))
    out = x[first * frame_len : min(x.size, (last + 1) * frame_len)]
    return Waveform(samples=out, sample_rate=w.sample_rate)


def rescale(w: Waveform) -> Waveform:
    """Divide by the max absolute sample; all-zero input passes through."""
    peak = np.max(np.abs(w.samples))
    if peak == 0.0:
        return w
    return Waveform(samples=w.samples / peak, sample_rate=w.sample_rate)


def split_frames(s: ComplexSpectrogram, seq_len: int = 100) -> list[ComplexSpectrogram]:
    """Consecutive non-overlapping seq_len chunks; the remainder is dropped.

    Training-time only: full-length utterances are enhanced unsplit.
    """
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    n_chunks = s.n_frames // seq_len
    return [
        ComplexSpectrogram(
            data=s.data[:, i * seq_len : (i + 1) * seq_len], config=s.config
        )
        for i in range(n_chunks)
    ]


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read a mono 16-bit PCM WAV file into float64 samples in [-1, 1]."""
    rate, data = wavfile.read(os.fspath(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    return Waveform(samples=data.astype(np.float64) / 32768.0, sample_rate=int(rate))


def write_wav(path: str | os.PathLike, w: Waveform) -> None:
    """Write 16-bit PCM WAV; out-of-range samples are clipped."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(os.fspath(path), w.sample_rate, pcm)
