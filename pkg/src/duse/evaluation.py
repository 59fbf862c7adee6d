"""Metrics and corpus-level evaluation: SI-SDR, real-time factor, reports."""
from __future__ import annotations

import os
import re
import shlex
import subprocess
import tempfile
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, ROLE_RVAE
from .corpus import ManifestEntry, read_pair
from .enhancement import (
    EnhancementMode,
    enhance,
    fine_tune_nda,
    fit_na,
    joint_from_checkpoint,
)
from .errors import UsageError
from .noise_model import NoiseVariant
from .signal_pipeline import Waveform, read_wav, write_wav
from .speech_prior import make_generator

SI_SDR_CAP = 100.0


def align(est: Waveform, ref: Waveform) -> Waveform:
    """Truncate or zero-pad est to ref's length (ISTFT can differ by up to
    one window)."""
    n = len(ref)
    s = est.samples[:n]
    if len(s) < n:
        s = np.concatenate([s, np.zeros(n - len(s))])
    return Waveform(samples=s, sample_rate=est.sample_rate)


def si_sdr(est: Waveform, ref: Waveform) -> float:
    """Scale-invariant SDR in dB, clamped to +-100.

    The reference direction is the target: with a = <est, ref> / ||ref||^2,
    returns 10 log10(||a ref||^2 / ||a ref - est||^2). Perfect (or exactly
    scaled) reconstruction hits the +100 dB cap; the symmetric floor keeps
    reports finite for estimates orthogonal to the reference.
    """
    if len(est) != len(ref):
        raise UsageError(
            f"length mismatch: est {len(est)} vs ref {len(ref)} samples"
        )
    r = ref.samples
    e = est.samples
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise UsageError("reference signal is identically zero")
    a = float(np.dot(e, r)) / ref_energy
    target = a * r
    dist = target - e
    num = float(np.dot(target, target))
    den = float(np.dot(dist, dist))
    if den == 0.0:
        return SI_SDR_CAP
    if num == 0.0:
        return -SI_SDR_CAP
    return float(np.clip(10.0 * np.log10(num / den), -SI_SDR_CAP, SI_SDR_CAP))


def rtf(proc, utterances: list[Waveform]) -> float:
    """Wall-clock processing time per second of audio, over the whole set."""
    if not utterances:
        raise UsageError("rtf needs at least one utterance")
    total_audio = sum(w.duration for w in utterances)
    start = time.perf_counter()
    for w in utterances:
        proc(w)
    elapsed = time.perf_counter() - start
    return elapsed / total_audio


@dataclass
class EvalReport:
    """Per-utterance enhancement results plus recomputable aggregates."""

    mode: str
    variant: str
    rows: list[dict] = field(default_factory=list)

    @property
    def errors(self) -> list[dict]:
        return [r for r in self.rows if r.get("error") is not None]

    def aggregates(self) -> dict:
        ok = [r for r in self.rows if r.get("error") is None]
        out = {"n_utterances": len(self.rows), "n_errors": len(self.errors)}
        noisy = [r["si_sdr_noisy"] for r in ok if r["si_sdr_noisy"] is not None]
        enh = [r["si_sdr_enhanced"] for r in ok if r["si_sdr_enhanced"] is not None]
        if noisy:
            out["median_si_sdr_noisy"] = float(np.median(noisy))
            out["mean_si_sdr_noisy"] = float(np.mean(noisy))
        if enh:
            out["median_si_sdr_enhanced"] = float(np.median(enh))
            out["mean_si_sdr_enhanced"] = float(np.mean(enh))
        if noisy and enh:
            out["median_improvement"] = float(
                np.median([e - n for e, n in zip(enh, noisy)])
            )
        ext = [r["external_metric"] for r in ok if r.get("external_metric") is not None]
        if ext:
            out["median_external_metric"] = float(np.median(ext))
            out["mean_external_metric"] = float(np.mean(ext))
        times = [r["proc_seconds"] for r in ok]
        durations = [r["duration_s"] for r in ok]
        if ok and sum(durations) > 0:
            out["rtf_overall"] = float(sum(times) / sum(durations))
        return out

    def to_lines(self) -> list[str]:
        """Line-oriented key=value form; rtf/proc_seconds are the only
        fields that vary across identically seeded runs."""
        lines = []
        for r in self.rows:
            parts = [f"row id={r['id']}", f"mode={self.mode}", f"variant={self.variant}"]
            for key in ("si_sdr_noisy", "si_sdr_enhanced", "external_metric"):
                if r.get(key) is not None:
                    parts.append(f"{key}={r[key]:.6f}")
            parts.append(f"iters={r['iters']}")
            parts.append(f"rtf={r['rtf']:.4f}")
            if r.get("error") is not None:
                parts.append(f"error={r['error']!r}")
            lines.append("\t".join(parts))
        for key, value in sorted(self.aggregates().items()):
            if isinstance(value, float):
                value = f"{value:.6f}" if "rtf" not in key else f"{value:.4f}"
            lines.append(f"aggregate {key}={value}")
        return lines

    def table(self) -> str:
        headers = ["id", "mode", "variant", "noisy", "enhanced", "iters", "rtf"]
        body = []
        for r in self.rows:
            if r.get("error") is not None:
                body.append([r["id"], self.mode, self.variant, "ERROR", r["error"][:40], "", ""])
                continue
            body.append([
                r["id"],
                self.mode,
                self.variant,
                "n/a" if r["si_sdr_noisy"] is None else f"{r['si_sdr_noisy']:7.2f}",
                "n/a" if r["si_sdr_enhanced"] is None else f"{r['si_sdr_enhanced']:7.2f}",
                str(r["iters"]),
                f"{r['rtf']:.3f}",
            ])
        widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
                  for i, h in enumerate(headers)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*headers), fmt.format(*("-" * w for w in widths))]
        lines.extend(fmt.format(*row) for row in body)
        return "\n".join(lines)

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n\n" + self.table() + "\n"


def _utt_seed(seed: int, utt_id: str) -> int:
    ss = np.random.SeedSequence([seed, zlib.crc32(utt_id.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def external_metric(cmd, ref: Waveform, est: Waveform) -> float:
    """Score est against ref with a user-supplied command.

    The command gets the reference and estimate WAV paths appended and must
    print a number; the first float on stdout is the score. This is the
    hook for standardized metrics (PESQ, ESTOI) that are not implemented
    natively.
    """
    argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
    with tempfile.TemporaryDirectory() as td:
        ref_path = os.path.join(td, "ref.wav")
        est_path = os.path.join(td, "est.wav")
        write_wav(ref_path, ref)
        write_wav(est_path, est)
        try:
            proc = subprocess.run(
                argv + [ref_path, est_path],
                capture_output=True,
                text=True,
                check=True,
            )
        except (OSError, subprocess.CalledProcessError) as exc:
            raise UsageError(f"metric command failed: {exc}") from exc
    match = re.search(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?", proc.stdout)
    if match is None:
        raise UsageError(
            f"metric command printed no number: {proc.stdout!r}"
        )
    return float(match.group(0))


def evaluate(
    noisy_manifest: list[ManifestEntry],
    checkpoint: Checkpoint,
    mode: EnhancementMode,
    variant: NoiseVariant | str,
    clean_manifest: list[ManifestEntry] | None = None,
    seed: int = 0,
    split: str = "test",
    write_wav_to=None,
    metric_cmd=None,
) -> EvalReport:
    """Enhance every utterance in a split and collect metrics.

    Checkpoint materialization happens outside the timed region; fitting
    (for na/nda), the transforms, and the filter are inside it. Failures
    are captured per utterance rather than aborting the sweep. If
    write_wav_to is given, it is called as write_wav_to(utt_id, waveform)
    for each enhanced output. metric_cmd, when set, adds an
    external_metric column via external_metric() for rows with references.
    """
    variant = NoiseVariant(variant)
    entries = [e for e in noisy_manifest if e.split == split]
    if not entries:
        raise UsageError(f"manifest has no entries with split={split!r}")
    if mode.kind == "na" and checkpoint.role != ROLE_RVAE:
        raise UsageError(
            f"na mode needs an {ROLE_RVAE!r} checkpoint, got {checkpoint.role!r}"
        )
    if mode.kind in ("nd", "nda") and checkpoint.variant is not None:
        if NoiseVariant(checkpoint.variant) is not variant:
            raise UsageError(
                f"checkpoint was trained for variant {checkpoint.variant!r}, "
                f"got {variant.value!r}"
            )
    nd_params = None
    if mode.kind == "nd":
        nd_params = joint_from_checkpoint(checkpoint)
    iters = {"na": mode.na_iters, "nd": 0, "nda": mode.nda_iters}[mode.kind]

    report = EvalReport(mode=mode.kind, variant=variant.value)
    for entry in entries:
        row = {"id": entry.utterance_id, "iters": iters, "error": None,
               "si_sdr_noisy": None, "si_sdr_enhanced": None}
        try:
            noisy, clean = read_pair(entry, clean_manifest or [])
            gen = make_generator(_utt_seed(seed, entry.utterance_id))
            start = time.perf_counter()
            if mode.kind == "na":
                params, _ = fit_na(noisy, checkpoint, variant, mode, gen)
            elif mode.kind == "nda":
                params, _ = fine_tune_nda(checkpoint, noisy, mode, gen)
            else:
                params = nd_params
            enhanced, _ = enhance(noisy, params, mode, gen)
            elapsed = time.perf_counter() - start
            row["proc_seconds"] = elapsed
            row["duration_s"] = noisy.duration
            row["rtf"] = elapsed / noisy.duration
            if clean is not None:
                row["si_sdr_noisy"] = si_sdr(align(noisy, clean), clean)
                row["si_sdr_enhanced"] = si_sdr(align(enhanced, clean), clean)
                if metric_cmd is not None:
                    row["external_metric"] = external_metric(
                        metric_cmd, clean, align(enhanced, clean)
                    )
            if write_wav_to is not None:
                write_wav_to(entry.utterance_id, enhanced)
        except Exception as exc:  # noqa: BLE001 - per-utterance isolation
            row["error"] = f"{type(exc).__name__}: {exc}"
            row.setdefault("proc_seconds", 0.0)
            row.setdefault("duration_s", 0.0)
            row.setdefault("rtf", float("nan"))
        report.rows.append(row)
    return report
