"""Command-line front end.

Settings resolve in precedence order: flags > DUSE_* environment variables >
--config YAML file > built-in defaults. Every run that produces outputs
writes the resolved settings next to them as effective_config.yaml.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config_file, write_config_snapshot
from .enhancement import (
    EnhancementMode,
    enhance,
    fine_tune_nda,
    fit_na,
    joint_from_checkpoint,
    train_nd,
)
from .errors import DuseError, ManifestError, UsageError
from .evaluation import _utt_seed, evaluate, rtf
from .noise_model import NoiseVariant
from .signal_pipeline import StftConfig, Waveform, read_wav, rescale, vad_trim, write_wav
from .speech_prior import make_generator, pretrain

ENV_PREFIX = "DUSE_"
_TRAIN_FIELDS = (
    "epochs", "batch_size", "hidden_dim", "latent_dim", "seq_len",
    "lr_start", "lr_end", "warmup_epochs", "seed",
)


def _cast_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {v!r}")


def _cast_snrs(v) -> tuple[float, ...]:
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    try:
        return tuple(float(tok) for tok in str(v).split(",") if tok.strip() != "")
    except ValueError as exc:
        raise UsageError(f"bad SNR list {v!r}: {exc}") from exc


class Settings:
    """Layered lookup over parsed args, environment, and config file."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        cfg_path = getattr(args, "config", None) or os.environ.get(ENV_PREFIX + "CONFIG")
        self.file = load_config_file(cfg_path) if cfg_path else {}
        self.resolved: dict = {}

    def get(self, name: str, default=None, cast=None):
        value = getattr(self.args, name, None)
        if value is None:
            env = os.environ.get(ENV_PREFIX + name.upper())
            if env is not None:
                value = env
            elif name in self.file:
                value = self.file[name]
        if value is None:
            value = default
        if value is not None and cast is not None:
            value = cast(value)
        self.resolved[name] = value
        return value

    def snapshot(self, out_dir: str, command: str) -> None:
        effective = {"command": command}
        for key, value in sorted(self.resolved.items()):
            if isinstance(value, tuple):
                value = list(value)
            effective[key] = value
        write_config_snapshot(os.path.join(out_dir, "effective_config.yaml"), effective)


def _resolve_device(name: str) -> str:
    import torch

    if name == "cpu":
        return "cpu"
    if name == "accel":
        if not torch.cuda.is_available():
            raise UsageError("--device accel requested but no accelerator is available")
        return "cuda"
    if name == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    raise UsageError(f"unknown device {name!r}")


def _train_config(s: Settings) -> TrainConfig:
    fields = TrainConfig().to_dict()
    casts = {"lr_start": float, "lr_end": float}
    for name in _TRAIN_FIELDS:
        value = s.get(name, None, cast=casts.get(name, int))
        if value is not None:
            fields[name] = value
    return TrainConfig(**fields)


def _load_manifest(path: str):
    if not path or not os.path.exists(path):
        raise UsageError(f"manifest not found: {path}")
    return corpus_mod.load_manifest(path)


def _write_history(path: str, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(
                "\t".join(
                    f"{k}={row[k]:.10g}" if isinstance(row[k], float) else f"{k}={row[k]}"
                    for k in ("epoch", "train_loss", "valid_loss", "lr", "kl_weight")
                )
                + "\n"
            )


def _write_trace(path: str, trace: list[float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, loss in enumerate(trace):
            fh.write(f"iter={k}\tloss={loss:.10g}\n")


def cmd_make_toy(s: Settings) -> int:
    out_dir = s.get("out_dir")
    n = s.get("n", 10, int)
    duration = s.get("duration", 3.0, float)
    seed = s.get("seed", 0, int)
    snrs = s.get("snrs", (0.0,), _cast_snrs)
    babble = s.get("babble", False, _cast_bool)
    os.makedirs(out_dir, exist_ok=True)
    s.snapshot(out_dir, "make-toy")
    paths = corpus_mod.make_toy_corpus(
        out_dir, n_utts=n, duration_s=duration, seed=seed,
        snrs=snrs, include_babble=babble,
    )
    for p in paths:
        print(p)
    return 0


def cmd_mix(s: Settings) -> int:
    out_dir = s.get("out_dir")
    seed = s.get("seed", 0, int)
    snrs = s.get("snrs", (-5.0, 0.0, 5.0), _cast_snrs)
    clean_entries = _load_manifest(s.get("clean_manifest"))
    noise_entries = _load_manifest(s.get("noise_manifest"))
    if not noise_entries:
        raise UsageError("noise manifest is empty")
    os.makedirs(os.path.join(out_dir, "noisy"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "clean"), exist_ok=True)
    s.snapshot(out_dir, "mix")
    rng = np.random.default_rng(seed)
    noisy_out, clean_out = [], []
    for entry in clean_entries:
        # SNR is defined on the trimmed clean signal
        clean = vad_trim(read_wav(entry.path))
        noise_entry = noise_entries[int(rng.integers(len(noise_entries)))]
        noise = read_wav(noise_entry.path)
        for snr in snrs:
            utt_id = f"{entry.utterance_id}_snr{snr:+g}"
            noisy = corpus_mod.mix_at_snr(clean, noise, snr, rng)
            gain = 1.0 / max(1.0, float(np.max(np.abs(noisy.samples))))
            for sub, w, acc in (("noisy", noisy, noisy_out), ("clean", clean, clean_out)):
                rel = os.path.join(sub, f"{utt_id}.wav")
                write_wav(
                    os.path.join(out_dir, rel),
                    Waveform(samples=gain * w.samples, sample_rate=w.sample_rate),
                )
                acc.append(
                    corpus_mod.ManifestEntry(
                        utterance_id=utt_id,
                        path=os.path.join(out_dir, rel),
                        split=entry.split,
                        speaker_id=entry.speaker_id,
                        snr_db=snr if sub == "noisy" else None,
                        noise_kind=noise_entry.noise_kind,
                    )
                )
    corpus_mod.save_manifest(noisy_out, os.path.join(out_dir, "noisy.tsv"))
    corpus_mod.save_manifest(clean_out, os.path.join(out_dir, "clean.tsv"))
    print(os.path.join(out_dir, "noisy.tsv"))
    return 0


def cmd_pretrain(s: Settings) -> int:
    out_dir = s.get("out_dir")
    manifest = _load_manifest(s.get("clean_manifest"))
    cfg = _train_config(s)
    stft_config = StftConfig(
        window_len=s.get("window_len", 1024, int), hop=s.get("hop", 256, int)
    )
    device = _resolve_device(s.get("device", "auto"))
    os.makedirs(out_dir, exist_ok=True)
    s.snapshot(out_dir, "pretrain")
    ckpt, history = pretrain(manifest, cfg, stft_config, device=device)
    ckpt_path = os.path.join(out_dir, "rvae.ckpt")
    save_checkpoint(ckpt, ckpt_path)
    _write_history(os.path.join(out_dir, "train_log.tsv"), history)
    print(ckpt_path)
    return 0


def cmd_train_nd(s: Settings) -> int:
    out_dir = s.get("out_dir")
    manifest = _load_manifest(s.get("noisy_manifest"))
    variant = NoiseVariant(s.get("variant"))
    rvae_ckpt = load_checkpoint(s.get("rvae_ckpt"))
    cfg = _train_config(s)
    if cfg.hidden_dim != rvae_ckpt.train.hidden_dim:
        cfg = TrainConfig(**{**cfg.to_dict(), "hidden_dim": rvae_ckpt.train.hidden_dim})
    device = _resolve_device(s.get("device", "auto"))
    os.makedirs(out_dir, exist_ok=True)
    s.snapshot(out_dir, "train-nd")
    ckpt, history = train_nd(manifest, rvae_ckpt, variant, cfg, device=device)
    ckpt_path = os.path.join(out_dir, f"nd_{variant.value}.ckpt")
    save_checkpoint(ckpt, ckpt_path)
    _write_history(os.path.join(out_dir, "train_log.tsv"), history)
    print(ckpt_path)
    return 0


def _mode_from_settings(s: Settings, kind: str) -> EnhancementMode:
    iters = s.get("iters", None, int)
    lr = s.get("lr", 1e-3, float)
    return EnhancementMode(
        kind=kind,
        na_iters=100 if iters is None else iters,
        na_lr=lr,
        nda_iters=25 if iters is None else iters,
        nda_lr=lr,
        mc_samples=s.get("mc_samples", 1, int),
        use_latent_mean=s.get("latent_mean", False, _cast_bool),
    )


def _enhance_one(noisy: Waveform, utt_id: str, ckpt, mode: EnhancementMode,
                 variant, seed: int, out_dir: str) -> str:
    gen = make_generator(_utt_seed(seed, utt_id))
    trace = None
    if mode.kind == "na":
        params, trace = fit_na(noisy, ckpt, variant, mode, gen)
    elif mode.kind == "nda":
        params, trace = fine_tune_nda(ckpt, noisy, mode, gen)
    else:
        params = joint_from_checkpoint(ckpt)
    enhanced, _ = enhance(noisy, params, mode, gen, variant=variant)
    out_path = os.path.join(out_dir, f"{utt_id}_enhanced.wav")
    write_wav(out_path, enhanced)
    if trace is not None:
        _write_trace(os.path.join(out_dir, f"{utt_id}.trace.txt"), trace)
    return out_path


def cmd_enhance(s: Settings) -> int:
    out_dir = s.get("out_dir")
    kind = s.get("mode")
    src = s.get("in_path")
    ckpt = load_checkpoint(s.get("ckpt"))
    seed = s.get("seed", 0, int)
    jobs = s.get("jobs", 1, int)
    mode = _mode_from_settings(s, kind)
    variant = s.get("variant")
    if variant is None:
        if ckpt.variant is None:
            raise UsageError("--variant is required when the checkpoint has no variant tag")
        variant = ckpt.variant
    variant = NoiseVariant(variant)
    os.makedirs(out_dir, exist_ok=True)
    s.snapshot(out_dir, "enhance")

    if src.endswith(".wav"):
        items = [(os.path.splitext(os.path.basename(src))[0], read_wav(src))]
    else:
        items = [(e.utterance_id, read_wav(e.path)) for e in _load_manifest(src)]

    def work(item):
        utt_id, noisy = item
        return _enhance_one(noisy, utt_id, ckpt, mode, variant, seed, out_dir)

    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(work, items))
    else:
        outputs = [work(item) for item in items]
    for p in outputs:
        print(p)
    return 0


def cmd_evaluate(s: Settings) -> int:
    out_dir = s.get("out_dir")
    kind = s.get("mode")
    noisy_manifest = _load_manifest(s.get("noisy_manifest"))
    clean_path = s.get("clean_manifest")
    clean_manifest = _load_manifest(clean_path) if clean_path else None
    ckpt = load_checkpoint(s.get("ckpt"))
    seed = s.get("seed", 0, int)
    split = s.get("split", "test")
    mode = _mode_from_settings(s, kind)
    variant = s.get("variant") or ckpt.variant
    if variant is None:
        raise UsageError("--variant is required when the checkpoint has no variant tag")
    metric_cmd = s.get("metric_cmd")
    os.makedirs(out_dir, exist_ok=True)
    s.snapshot(out_dir, "evaluate")

    enhanced_dir = os.path.join(out_dir, "enhanced")
    os.makedirs(enhanced_dir, exist_ok=True)

    def sink(utt_id, w):
        write_wav(os.path.join(enhanced_dir, f"{utt_id}.wav"), w)

    report = evaluate(
        noisy_manifest, ckpt, mode, variant,
        clean_manifest=clean_manifest, seed=seed, split=split, write_wav_to=sink,
        metric_cmd=metric_cmd,
    )
    text = report.to_text()
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text)
    return 1 if report.errors else 0


def cmd_bench_rtf(s: Settings) -> int:
    rvae_ckpt = load_checkpoint(s.get("rvae_ckpt"))
    nd_ckpt = load_checkpoint(s.get("nd_ckpt"))
    variant = NoiseVariant(s.get("variant") or nd_ckpt.variant)
    seed = s.get("seed", 0, int)
    na_iters = s.get("na_iters", 100, int)
    src = s.get("in_path")
    if src.endswith(".wav"):
        waves = [read_wav(src)]
    else:
        entries = _load_manifest(src)
        test = [e for e in entries if e.split == "test"] or entries
        waves = [read_wav(e.path) for e in test]
    out_dir = s.get("out_dir")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        s.snapshot(out_dir, "bench-rtf")

    na_mode = EnhancementMode(kind="na", na_iters=na_iters)
    nd_mode = EnhancementMode(kind="nd")
    nd_params = joint_from_checkpoint(nd_ckpt)
    counter = {"na": 0, "nd": 0}

    def proc_na(w):
        counter["na"] += 1
        gen = make_generator(seed + counter["na"])
        params, _ = fit_na(w, rvae_ckpt, variant, na_mode, gen)
        enhance(w, params, na_mode, gen)

    def proc_nd(w):
        counter["nd"] += 1
        gen = make_generator(seed + counter["nd"])
        enhance(w, nd_params, nd_mode, gen)

    # timing runs exclusively; --jobs is ignored here on purpose
    rtf_nd = rtf(proc_nd, waves)
    rtf_na = rtf(proc_na, waves)
    ratio = rtf_na / rtf_nd if rtf_nd > 0 else float("inf")
    print(f"rtf_na={rtf_na:.4f}\trtf_nd={rtf_nd:.4f}\tratio={ratio:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duse",
        description="Unsupervised speech enhancement with a recurrent "
        "variational prior and learned noise variance models.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="YAML file with default settings")
    common.add_argument("--device", default=None, choices=("auto", "cpu", "accel"))
    common.add_argument("--jobs", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def train_flags(p):
        for name in ("epochs", "batch_size", "hidden_dim", "latent_dim", "seq_len"):
            p.add_argument("--" + name.replace("_", "-"), type=int, default=None)
        p.add_argument("--lr-start", type=float, default=None)
        p.add_argument("--lr-end", type=float, default=None)
        p.add_argument("--warmup-epochs", type=int, default=None)

    p = sub.add_parser("make-toy", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--snrs", default=None, help="comma-separated dB values")
    p.add_argument("--babble", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("mix", parents=[common], help="mix clean and noise manifests at SNRs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--clean-manifest", required=True)
    p.add_argument("--noise-manifest", required=True)
    p.add_argument("--snrs", default=None)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("pretrain", parents=[common], help="train the clean-speech prior")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--clean-manifest", required=True)
    p.add_argument("--window-len", type=int, default=None)
    p.add_argument("--hop", type=int, default=None)
    train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-nd", parents=[common], help="train a noise model on noisy audio")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--noisy-manifest", required=True)
    p.add_argument("--rvae-ckpt", required=True)
    p.add_argument("--variant", required=True, choices=[v.value for v in NoiseVariant])
    train_flags(p)
    p.set_defaults(func=cmd_train_nd)

    p = sub.add_parser("enhance", parents=[common], help="enhance a wav or manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--in", dest="in_path", required=True, metavar="WAV_OR_MANIFEST")
    p.add_argument("--mode", required=True, choices=("na", "nd", "nda"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--variant", default=None, choices=[v.value for v in NoiseVariant])
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--latent-mean", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", parents=[common], help="run a split and report metrics")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--noisy-manifest", required=True)
    p.add_argument("--clean-manifest", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", required=True, choices=("na", "nd", "nda"))
    p.add_argument("--variant", default=None, choices=[v.value for v in NoiseVariant])
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--latent-mean", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--split", default=None, choices=("train", "valid", "test"))
    p.add_argument("--metric-cmd", default=None,
                   help="external scorer invoked as CMD ref.wav est.wav, first "
                        "float on stdout recorded per utterance")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-rtf", parents=[common],
                       help="time na vs nd enhancement on identical inputs")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--in", dest="in_path", required=True, metavar="WAV_OR_MANIFEST")
    p.add_argument("--rvae-ckpt", required=True)
    p.add_argument("--nd-ckpt", required=True)
    p.add_argument("--variant", default=None, choices=[v.value for v in NoiseVariant])
    p.add_argument("--na-iters", type=int, default=None)
    p.set_defaults(func=cmd_bench_rtf)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings(args)
        return args.func(settings)
    except (UsageError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
