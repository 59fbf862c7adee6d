"""Corpus plumbing: manifests, SNR mixing, and a synthetic desk-scale corpus.

Manifests are line-oriented text, one utterance per line, tab-separated
key=value fields (id, path, split, speaker, snr_db, noise_kind). Paths are
stored relative to the manifest file so a corpus directory can be moved
wholesale.

The toy corpus is harmonic tones with wandering pitch and syllable-rate
amplitude envelopes over AR(1) colored noise. That gives the models real
temporal structure to learn at desk scale; it is not a claim about speech.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa: F401
from .errors import ManifestError, UsageError
from .signal_pipeline import DEFAULT_SAMPLE_RATE, Waveform, read_wav, write_wav

SPLITS = ("train", "valid", "test")
_FIELDS = ("id", "path", "split", "speaker", "snr_db", "noise_kind")


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    split: str
    speaker_id: str | None = None
    snr_db: float | None = None
    noise_kind: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(
                f"utterance {self.utterance_id!r}: unknown split {self.split!r}"
            )


def load_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Parse a manifest file; resolves paths and checks they exist."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = {}
            for token in line.split("\t"):
                key, sep, value = token.partition("=")
                if not sep:
                    raise ManifestError(
                        f"{path}:{lineno}: malformed field {token!r}"
                    )
                if key not in _FIELDS:
                    raise ManifestError(f"{path}:{lineno}: unknown field {key!r}")
                if key in fields:
                    raise ManifestError(f"{path}:{lineno}: repeated field {key!r}")
                fields[key] = value
            for required in ("id", "path", "split"):
                if required not in fields:
                    raise ManifestError(
                        f"{path}:{lineno}: missing required field {required!r}"
                    )
            utt_id = fields["id"]
            if utt_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {utt_id!r}")
            seen.add(utt_id)
            wav_path = fields["path"]
            if not os.path.isabs(wav_path):
                wav_path = os.path.normpath(os.path.join(base, wav_path))
            if not os.path.exists(wav_path):
                raise ManifestError(
                    f"{path}:{lineno}: audio file not found: {wav_path}"
                )
            snr = fields.get("snr_db")
            try:
                entries.append(
                    ManifestEntry(
                        utterance_id=utt_id,
                        path=wav_path,
                        split=fields["split"],
                        speaker_id=fields.get("speaker"),
                        snr_db=None if snr is None else float(snr),
                        noise_kind=fields.get("noise_kind"),
                    )
                )
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return entries


def save_manifest(entries: list[ManifestEntry], path: str | os.PathLike) -> None:
    """Write entries in order; atomic via temp-file rename."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    lines = []
    for e in entries:
        fields = [("id", e.utterance_id)]
        try:
            rel = os.path.relpath(e.path, base)
        except ValueError:  # different drive on windows
            rel = e.path
        fields.append(("path", rel))
        fields.append(("split", e.split))
        if e.speaker_id is not None:
            fields.append(("speaker", e.speaker_id))
        if e.snr_db is not None:
            fields.append(("snr_db", repr(float(e.snr_db))))
        if e.noise_kind is not None:
            fields.append(("noise_kind", e.noise_kind))
        lines.append("\t".join(f"{k}={v}" for k, v in fields))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def mix_at_snr(
    clean: Waveform, noise: Waveform, snr_db: float, rng: np.random.Generator
) -> Waveform:
    """Add noise to clean at exactly the requested full-utterance SNR.

    Shorter noise is tiled; the segment start offset is drawn from rng. The
    noise is scaled by sqrt(P_clean / (P_noise * 10^(snr/10))) so the
    achieved SNR matches by construction; the sum is returned unnormalized.
    """
    if clean.sample_rate != noise.sample_rate:
        raise UsageError(
            f"sample rate mismatch: clean {clean.sample_rate} Hz, "
            f"noise {noise.sample_rate} Hz"
        )
    n = len(clean)
    nse = noise.samples
    if len(nse) < n:
        reps = -(-n // len(nse)) + 1
        nse = np.tile(nse, reps)
    offset = int(rng.integers(0, len(nse) - n + 1))
    segment = nse[offset : offset + n]
    p_clean = float(np.mean(clean.samples ** 2))
    p_noise = float(np.mean(segment ** 2))
    if p_clean == 0.0:
        raise UsageError("clean signal has zero power")
    if p_noise == 0.0:
        raise UsageError("noise segment has zero power")
    alpha = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(
        samples=clean.samples + alpha * segment, sample_rate=clean.sample_rate
    )


def _harmonic_utterance(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Harmonic tone with wandering pitch and a syllable-rate envelope."""
    t = np.arange(n) / sr
    f0_base = rng.uniform(110.0, 220.0)
    vib_rate = rng.uniform(0.3, 1.2)
    vib_phase = rng.uniform(0.0, 2 * np.pi)
    glide = rng.uniform(-0.3, 0.3)  # octaves over the utterance
    f0 = f0_base * 2.0 ** (
        0.25 * np.sin(2 * np.pi * vib_rate * t + vib_phase) + glide * t / t[-1]
    )
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = max(1, int(0.4 * sr / 2 / f0.max()))
    sig = np.zeros(n)
    for k in range(1, n_harm + 1):
        gain = rng.uniform(0.5, 1.0) / k
        sig += gain * np.sin(k * phase + rng.uniform(0.0, 2 * np.pi))
    # syllable-ish amplitude bumps, kept off the floor so nothing trims away
    syl_rate = rng.uniform(2.0, 4.0)
    env = 0.25 + 0.75 * np.sin(
        np.pi * ((syl_rate * t + rng.uniform(0.0, 1.0)) % 1.0)
    ) ** 2
    sig *= env
    return sig / np.max(np.abs(sig))


def _ar1_noise(n: int, rng: np.random.Generator, rho: float = 0.9) -> np.ndarray:
    w = rng.standard_normal(n + 200)
    x = scipy.signal.lfilter([1.0], [1.0, -rho], w)[200:]  # drop the burn-in
    return x / np.sqrt(np.mean(x ** 2))


def _babble_noise(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    carrier = _ar1_noise(n, rng, rho=0.8)
    mod = 1.0 + 0.8 * np.sin(
        2 * np.pi * rng.uniform(3.0, 6.0) * t + rng.uniform(0.0, 2 * np.pi)
    ) * np.sin(2 * np.pi * rng.uniform(0.4, 0.9) * t)
    x = carrier * np.clip(mod, 0.1, None)
    return x / np.sqrt(np.mean(x ** 2))


def _split_for(idx: int, n_utts: int) -> str:
    # deterministic round-robin-ish assignment with all splits present
    if n_utts < 3:
        return "train"
    n_valid = max(1, n_utts // 6)
    n_test = max(1, n_utts // 4)
    if idx < n_utts - n_valid - n_test:
        return "train"
    if idx < n_utts - n_test:
        return "valid"
    return "test"


def make_toy_corpus(
    out_dir: str | os.PathLike,
    n_utts: int = 10,
    duration_s: float = 3.0,
    seed: int = 0,
    snrs: tuple[float, ...] = (0.0,),
    include_babble: bool = False,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> tuple[str, str, str]:
    """Generate a deterministic synthetic corpus under out_dir.

    Writes clean/, noise/, and noisy/ WAV trees plus clean.tsv, noise.tsv,
    noisy.tsv manifests; returns the three manifest paths. Every utterance
    is exactly duration_s long; per-utterance SNRs cycle through snrs. All
    randomness derives from seed, so output bytes are reproducible.
    """
    if n_utts < 1:
        raise UsageError("n_utts must be >= 1")
    out_dir = os.fspath(out_dir)
    for sub in ("clean", "noise", "noisy"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    n = int(round(duration_s * sample_rate))
    clean_entries, noise_entries, noisy_entries = [], [], []
    for idx in range(n_utts):
        utt_id = f"utt_{idx:04d}"
        speech_rng = np.random.default_rng([seed, idx, 0])
        noise_rng = np.random.default_rng([seed, idx, 1])
        mix_rng = np.random.default_rng([seed, idx, 2])
        snr = float(snrs[idx % len(snrs)])
        kind = "babble" if include_babble and idx % 2 == 1 else "ar1"

        clean = Waveform(
            samples=0.7 * _harmonic_utterance(n, sample_rate, speech_rng),
            sample_rate=sample_rate,
        )
        if kind == "babble":
            nse = _babble_noise(n, sample_rate, noise_rng)
        else:
            nse = _ar1_noise(n, noise_rng)
        noise = Waveform(samples=nse, sample_rate=sample_rate)
        noisy = mix_at_snr(clean, noise, snr, mix_rng)
        scaled_noise = Waveform(
            samples=noisy.samples - clean.samples, sample_rate=sample_rate
        )
        # one shared gain keeps clean + noise == noisy on disk and leaves
        # the SNR untouched; int16 would clip the sum otherwise
        gain = 1.0 / max(1.0, float(np.max(np.abs(noisy.samples))))
        split = _split_for(idx, n_utts)

        for sub, w, entries, entry_snr in (
            ("clean", clean, clean_entries, None),
            ("noise", scaled_noise, noise_entries, None),
            ("noisy", noisy, noisy_entries, snr),
        ):
            rel = os.path.join(sub, f"{utt_id}.wav")
            write_wav(
                os.path.join(out_dir, rel),
                Waveform(samples=gain * w.samples, sample_rate=sample_rate),
            )
            entries.append(
                ManifestEntry(
                    utterance_id=utt_id,
                    path=os.path.join(out_dir, rel),
                    split=split,
                    snr_db=entry_snr,
                    noise_kind=kind,
                )
            )
    paths = []
    for name, entries in (
        ("clean", clean_entries),
        ("noise", noise_entries),
        ("noisy", noisy_entries),
    ):
        mpath = os.path.join(out_dir, f"{name}.tsv")
        save_manifest(entries, mpath)
        paths.append(mpath)
    return tuple(paths)


def read_pair(
    noisy_entry: ManifestEntry, clean_manifest: list[ManifestEntry]
) -> tuple[Waveform, Waveform | None]:
    """Noisy waveform plus its clean reference, matched by utterance id."""
    noisy = read_wav(noisy_entry.path)
    for e in clean_manifest:
        if e.utterance_id == noisy_entry.utterance_id:
            return noisy, read_wav(e.path)
    return noisy, None
