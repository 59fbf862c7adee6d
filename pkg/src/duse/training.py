"""Shared optimization loop and data preparation for the two training modes."""
from __future__ import annotations

import copy

import numpy as np
import torch

from .config import TrainConfig
from .errors import TrainingDivergedError, UsageError
from .signal_pipeline import StftConfig, power, read_wav, rescale, split_frames, stft, vad_trim

ADAM_BETAS = (0.9, 0.99)
ADAM_EPS = 1e-9
# fixed offset so validation draws are identical across epochs (comparable losses)
_VALID_SEED_OFFSET = 10_000_019


def state_to_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_state_from_numpy(module: torch.nn.Module, state: dict[str, np.ndarray]) -> None:
    tensors = {k: torch.from_numpy(np.asarray(v)) for k, v in state.items()}
    module.load_state_dict(tensors)


def load_power_segments(
    manifest, split: str, stft_config: StftConfig, seq_len: int
) -> list[np.ndarray]:
    """Preprocess one manifest split into fixed-length power segments.

    Each utterance is VAD-trimmed, rescaled to [-1, 1], transformed, and cut
    into non-overlapping seq_len-frame chunks; segments come back as (T, F)
    float64 arrays ready to stack into batches.
    """
    entries = [e for e in manifest if e.split == split]
    if not entries:
        raise UsageError(f"manifest has no entries with split={split!r}")
    segments = []
    for entry in entries:
        w = rescale(vad_trim(read_wav(entry.path)))
        if len(w) < stft_config.window_len:
            continue
        spec = stft(w, stft_config)
        for chunk in split_frames(spec, seq_len):
            segments.append(power(chunk).T.copy())
    if not segments:
        raise UsageError(
            f"split {split!r} produced no {seq_len}-frame segments; "
            "utterances are too short for this seq_len"
        )
    return segments


def _batches(segments, order, batch_size):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield np.stack([segments[i] for i in idx], axis=1)  # (T, B, F)


def run_epochs(
    train_segments: list[np.ndarray],
    valid_segments: list[np.ndarray],
    loss_fn,
    modules: dict[str, torch.nn.Module],
    trainable,
    cfg: TrainConfig,
    kl_schedule=lambda epoch: 1.0,
    device: str = "cpu",
) -> tuple[dict, list[dict], dict]:
    """Adam + cosine-annealing epoch loop with best-by-validation selection.

    loss_fn(batch, generator, kl_weight) must return the mean per-sequence
    loss for a (T, B, F) float64 batch. Validation always runs at
    kl_weight=1 with a fixed generator so epoch losses are comparable.
    Returns (best state dicts per module, per-epoch history, metadata).
    """
    optimizer = torch.optim.Adam(
        trainable, lr=cfg.lr_start, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=cfg.epochs, eta_min=cfg.lr_end
    )
    order_rng = np.random.default_rng(cfg.seed)
    sample_gen = torch.Generator()
    sample_gen.manual_seed(cfg.seed)

    best = {"loss": np.inf, "epoch": -1, "states": None}
    history = []
    for epoch in range(cfg.epochs):
        kl_weight = float(kl_schedule(epoch))
        lr = optimizer.param_groups[0]["lr"]
        order = order_rng.permutation(len(train_segments))

        train_losses = []
        for step, batch in enumerate(_batches(train_segments, order, cfg.batch_size)):
            bt = torch.from_numpy(batch).to(device)
            loss = loss_fn(bt, sample_gen, kl_weight)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "non-finite training loss",
                    epoch=epoch, step=step, loss=float(loss.detach()),
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            train_losses.append(float(loss.detach()))
        scheduler.step()

        valid_gen = torch.Generator()
        valid_gen.manual_seed(cfg.seed + _VALID_SEED_OFFSET)
        with torch.no_grad():
            valid_losses = [
                float(loss_fn(torch.from_numpy(b).to(device), valid_gen, 1.0))
                for b in _batches(
                    valid_segments, np.arange(len(valid_segments)), cfg.batch_size
                )
            ]
        valid_loss = float(np.mean(valid_losses))
        if not np.isfinite(valid_loss):
            raise TrainingDivergedError(
                "non-finite validation loss", epoch=epoch, loss=valid_loss
            )
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(train_losses)),
                "valid_loss": valid_loss,
                "lr": lr,
                "kl_weight": kl_weight,
            }
        )
        if valid_loss < best["loss"]:
            best = {
                "loss": valid_loss,
                "epoch": epoch,
                "states": {
                    name: copy.deepcopy(state_to_numpy(m)) for name, m in modules.items()
                },
            }

    meta = {
        "epochs_run": cfg.epochs,
        "best_epoch": best["epoch"],
        "best_valid_loss": best["loss"],
        "seed": cfg.seed,
    }
    return best["states"], history, meta
