"""Joint model assembly: Wiener posterior, enhancement objective, and the
noise-agnostic / noise-dependent / noise-adaptation regimes.

The clean-speech posterior given the latents is closed form: with speech
variance vs and noise variance vn, the posterior mean is the Wiener filter
vs/(vs+vn) * x and the posterior variance is vs*vn/(vs+vn). The encoder and
noise parameters are fitted by minimizing the negative ELBO

    sum_t IS(|x_t|^2, vs_t + vn_t) + sum_t KL(q_t || N(0, I)),

per utterance (NA / NDA) or over a noisy corpus (ND). The pre-trained
decoder stays frozen throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import Checkpoint, ROLE_ND, ROLE_RVAE
from .config import TrainConfig
from .errors import TrainingDivergedError, UsageError
from .noise_model import (
    NoiseContext,
    NoiseParams,
    NoiseVariant,
    init_noise_params,
    noise_from_checkpoint,
)
from .signal_pipeline import ComplexSpectrogram, StftConfig, Waveform, istft, power, rescale, stft
from .speech_prior import (
    RvaeParams,
    _check_power,
    is_div,
    is_div_t,
    kl_std_normal_t,
    rvae_from_checkpoint,
)
from . import training

VARIANCE_FLOOR = 1e-10


@dataclass(frozen=True)
class EnhancementMode:
    """Which regime to run and its per-utterance optimization settings."""

    kind: str  # "na" | "nd" | "nda"
    na_iters: int = 100
    na_lr: float = 1e-3
    nda_iters: int = 25
    nda_lr: float = 1e-3
    mc_samples: int = 1
    use_latent_mean: bool = False

    def __post_init__(self):
        if self.kind not in ("na", "nd", "nda"):
            raise ValueError(f"unknown enhancement mode {self.kind!r}")
        if self.na_iters < 0 or self.nda_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.na_lr <= 0 or self.nda_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass(frozen=True)
class PosteriorEstimate:
    """Closed-form clean-speech posterior: complex mean and variance, (F, T)."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.complex128)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.shape != var.shape or mean.ndim != 2:
            raise ValueError("posterior mean/var must be matching 2-D arrays")
        if np.any(var <= 0):
            raise ValueError("posterior variance must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)


@dataclass
class JointParams:
    """Everything enhance() needs: RVAE, noise net, and the STFT geometry."""

    rvae: RvaeParams
    noise: NoiseParams
    stft: StftConfig


def wiener_posterior(
    x: ComplexSpectrogram, vs: np.ndarray, vn: np.ndarray
) -> PosteriorEstimate:
    """Element-wise Wiener posterior; variances floored at 1e-10 first."""
    vs = np.asarray(vs, dtype=np.float64)
    vn = np.asarray(vn, dtype=np.float64)
    if vs.shape != x.data.shape or vn.shape != x.data.shape:
        raise ValueError(
            f"shape mismatch: x {x.data.shape}, vs {vs.shape}, vn {vn.shape}"
        )
    if np.any(vs <= 0) or np.any(vn <= 0):
        raise ValueError("speech and noise variances must be strictly positive")
    vs = np.maximum(vs, VARIANCE_FLOOR)
    vn = np.maximum(vn, VARIANCE_FLOOR)
    total = vs + vn
    return PosteriorEstimate(mean=(vs / total) * x.data, var=vs * vn / total)


def mixture_nll_term(x_power: np.ndarray, vs: np.ndarray, vn: np.ndarray) -> float:
    """IS divergence between |x|^2 and the mixture variance vs + vn."""
    vs = np.asarray(vs, dtype=np.float64)
    vn = np.asarray(vn, dtype=np.float64)
    if vs.shape != vn.shape:
        raise ValueError(f"shape mismatch: vs {vs.shape} vs vn {vn.shape}")
    return is_div(x_power, vs + vn)


def enhancement_elbo_loss(
    x_power: np.ndarray,
    rvae: RvaeParams,
    noise: NoiseParams,
    variant: NoiseVariant | str,
    rng: torch.Generator,
    mc_samples: int = 1,
    as_tensor: bool = False,
):
    """Negative enhancement ELBO for one noisy sequence.

    The encoder runs on the noisy power; a single joint latent draw feeds
    both the decoder and (for lv/nolv) the noise net; the result is averaged
    over mc_samples draws. Differentiable w.r.t. encoder and noise
    parameters; the decoder is used as a fixed function of z.
    """
    variant = NoiseVariant(variant)
    if variant is not noise.variant:
        raise UsageError(
            f"noise params are for variant {noise.variant.value!r}, got {variant.value!r}"
        )
    p = _check_power(x_power, "x_power")
    device = next(rvae.decoder.parameters()).device
    pt = torch.from_numpy(p.T.copy()).unsqueeze(1).to(device)
    loss = _enhancement_loss_t(pt, rvae.encoder, rvae.decoder, noise.net, rng, mc_samples)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            "non-finite enhancement loss", loss=float(loss.detach())
        )
    return loss if as_tensor else float(loss.detach())


def _enhancement_loss_t(pt, encoder, decoder, noise_net, generator, mc_samples):
    """Torch core; pt is a (T, B, F) noisy power batch, returns the batch mean."""
    total = 0.0
    for _ in range(mc_samples):
        mean, var, z = encoder(pt, generator=generator)
        vs = decoder(z)
        vn = noise_net(noisy_power=pt, latents=z)
        total = total + (is_div_t(pt, vs + vn) + kl_std_normal_t(mean, var)).mean()
    return total / mc_samples


def _noisy_power(x: Waveform, stft_config: StftConfig) -> tuple[np.ndarray, float]:
    peak = float(np.max(np.abs(x.samples)))
    return power(stft(rescale(x), stft_config)), peak


def _fit_params(
    x: Waveform,
    params: JointParams,
    iters: int,
    lr: float,
    mc_samples: int,
    rng: torch.Generator,
) -> list[float]:
    """Adam on encoder + noise net for one utterance; the decoder is frozen.

    Returns the loss trace: value before each step plus a final evaluation,
    so trace[k] is the loss after k steps (length iters + 1).
    """
    xpow, _ = _noisy_power(x, params.stft)
    device = next(params.rvae.decoder.parameters()).device
    pt = torch.from_numpy(xpow.T.copy()).unsqueeze(1).to(device)
    encoder, decoder, noise_net = params.rvae.encoder, params.rvae.decoder, params.noise.net

    decoder.requires_grad_(False)
    trainable = list(encoder.parameters()) + list(noise_net.parameters())
    optimizer = torch.optim.Adam(
        trainable, lr=lr, betas=training.ADAM_BETAS, eps=training.ADAM_EPS
    )
    trace = []
    for step in range(iters):
        loss = _enhancement_loss_t(pt, encoder, decoder, noise_net, rng, mc_samples)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                "non-finite per-utterance loss", step=step, loss=float(loss.detach())
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))
    with torch.no_grad():
        # diagnostic eval on a cloned generator: nda_iters=0 must leave rng
        # untouched so it reduces exactly to nd enhancement
        eval_rng = torch.Generator(device=rng.device)
        eval_rng.set_state(rng.get_state())
        trace.append(
            float(_enhancement_loss_t(pt, encoder, decoder, noise_net, eval_rng, mc_samples))
        )
    return trace


def fit_na(
    x: Waveform,
    pretrained: Checkpoint,
    variant: NoiseVariant | str,
    mode: EnhancementMode,
    rng: torch.Generator,
) -> tuple[JointParams, list[float]]:
    """Noise-agnostic fit on a single utterance.

    Starts from the pre-trained encoder and a fresh noise net whose initial
    variance sits at the utterance's mean noisy power, then runs
    mode.na_iters Adam steps at the constant rate mode.na_lr.
    """
    if mode.kind != "na":
        raise UsageError(f"fit_na requires mode kind 'na', got {mode.kind!r}")
    if pretrained.role != ROLE_RVAE:
        raise UsageError(
            f"noise-agnostic fitting needs an {ROLE_RVAE!r} checkpoint, "
            f"got role {pretrained.role!r}"
        )
    variant = NoiseVariant(variant)
    rvae = rvae_from_checkpoint(pretrained)
    xpow, _ = _noisy_power(x, pretrained.stft)
    noise_seed = int(torch.randint(2 ** 31 - 1, (1,), generator=rng))
    noise = init_noise_params(
        variant,
        pretrained.stft.n_freq,
        pretrained.train.latent_dim,
        pretrained.train.hidden_dim,
        seed=noise_seed,
        init_variance=max(float(xpow.mean()), VARIANCE_FLOOR),
    )
    params = JointParams(rvae=rvae, noise=noise, stft=pretrained.stft)
    trace = _fit_params(x, params, mode.na_iters, mode.na_lr, mode.mc_samples, rng)
    return params, trace


def joint_from_checkpoint(ckpt: Checkpoint) -> JointParams:
    """Materialize enhance()-ready parameters from an nd_trained checkpoint."""
    if ckpt.role != ROLE_ND:
        raise UsageError(
            f"expected an {ROLE_ND!r} checkpoint, got role {ckpt.role!r}"
        )
    return JointParams(
        rvae=rvae_from_checkpoint(ckpt),
        noise=noise_from_checkpoint(ckpt),
        stft=ckpt.stft,
    )


def fine_tune_nda(
    nd_ckpt: Checkpoint,
    x: Waveform,
    mode: EnhancementMode,
    rng: torch.Generator,
) -> tuple[JointParams, list[float]]:
    """Noise adaptation: the per-utterance loop started from ND parameters.

    With nda_iters=0 this reduces exactly to ND enhancement. Useful counts
    are far below the noise-agnostic regime (tens rather than hundreds).
    """
    if mode.kind != "nda":
        raise UsageError(f"fine_tune_nda requires mode kind 'nda', got {mode.kind!r}")
    params = joint_from_checkpoint(nd_ckpt)
    trace = _fit_params(x, params, mode.nda_iters, mode.nda_lr, mode.mc_samples, rng)
    return params, trace


def train_nd(
    noisy_manifest,
    pretrained: Checkpoint,
    variant: NoiseVariant | str,
    cfg: TrainConfig,
    device: str = "cpu",
) -> tuple[Checkpoint, list[dict]]:
    """Noise-dependent training on a noisy-speech corpus (no clean targets).

    Optimizes the enhancement objective over seq_len-frame segments with
    Adam and the cosine schedule; the decoder stays frozen; the best model
    by validation loss is returned tagged with the variant.
    """
    variant = NoiseVariant(variant)
    if pretrained.role != ROLE_RVAE:
        raise UsageError(
            f"noise-dependent training needs an {ROLE_RVAE!r} checkpoint, "
            f"got role {pretrained.role!r}"
        )
    if cfg.hidden_dim != pretrained.train.hidden_dim:
        raise UsageError(
            "noise hidden_dim differing from the RVAE hidden_dim is not "
            "representable in a checkpoint; set cfg.hidden_dim to match"
        )
    stft_config = pretrained.stft
    train_segs = training.load_power_segments(
        noisy_manifest, "train", stft_config, cfg.seq_len
    )
    valid_segs = training.load_power_segments(
        noisy_manifest, "valid", stft_config, cfg.seq_len
    )
    rvae = rvae_from_checkpoint(pretrained)
    noise = init_noise_params(
        variant,
        stft_config.n_freq,
        pretrained.train.latent_dim,
        cfg.hidden_dim,
        seed=cfg.seed,
        init_variance=1.0,
    )
    encoder = rvae.encoder.to(device)
    decoder = rvae.decoder.to(device)
    noise_net = noise.net.to(device)
    decoder.requires_grad_(False)

    def loss_fn(batch, generator, kl_weight):
        # kl_weight unused: no warm-up in this stage
        return _enhancement_loss_t(batch, encoder, decoder, noise_net, generator, 1)

    modules = {"encoder": encoder, "decoder": decoder, "noise": noise_net}
    trainable = list(encoder.parameters()) + list(noise_net.parameters())
    best_states, history, meta = training.run_epochs(
        train_segs, valid_segs, loss_fn, modules, trainable, cfg, device=device
    )
    # record the dims the modules were actually built with
    nd_cfg = TrainConfig(
        **{**cfg.to_dict(), "latent_dim": pretrained.train.latent_dim,
           "hidden_dim": pretrained.train.hidden_dim}
    )
    ckpt = Checkpoint(
        role=ROLE_ND,
        params=best_states,
        stft=stft_config,
        train=nd_cfg,
        variant=variant.value,
        meta=meta,
    )
    return ckpt, history


def enhance(
    x: Waveform,
    params: JointParams,
    mode: EnhancementMode,
    rng: torch.Generator,
    variant: NoiseVariant | str | None = None,
) -> tuple[Waveform, PosteriorEstimate]:
    """Enhance one utterance with fitted parameters.

    Pipeline: rescale -> STFT -> encode noisy power -> latents (sampled, or
    the posterior mean with mode.use_latent_mean) -> speech/noise variances
    -> Wiener posterior -> ISTFT of the posterior mean. The input's peak
    scale is restored on the way out; output length is within one window of
    the input.
    """
    if variant is not None and NoiseVariant(variant) is not params.noise.variant:
        raise UsageError(
            f"params are for variant {params.noise.variant.value!r}, got "
            f"{NoiseVariant(variant).value!r}"
        )
    peak = float(np.max(np.abs(x.samples)))
    scaled = rescale(x)
    spec = stft(scaled, params.stft)
    xpow = power(spec)
    pt = torch.from_numpy(xpow.T.copy()).unsqueeze(1)
    with torch.no_grad():
        _, _, z = params.rvae.encoder(
            pt, generator=rng, sample=not mode.use_latent_mean
        )
        vs = params.rvae.decoder(z)[:, 0, :].numpy().T
        vn = params.noise.net(noisy_power=pt, latents=z)[:, 0, :].numpy().T
    post = wiener_posterior(spec, vs, vn)
    y = istft(ComplexSpectrogram(data=post.mean, config=params.stft))
    gain = peak if peak > 0 else 1.0
    out = Waveform(samples=y.samples * gain, sample_rate=x.sample_rate)
    return out, PosteriorEstimate(mean=post.mean * gain, var=post.var * gain ** 2)
