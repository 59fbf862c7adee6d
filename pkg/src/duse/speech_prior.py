"""Causal recurrent VAE used as the clean-speech prior.

The generative decoder maps a latent sequence z_{1:t} to a per-frame,
per-bin variance of a circularly-symmetric zero-mean complex Gaussian over
STFT frames. The inference encoder produces a diagonal Gaussian over z_t
from the observation frames t..T (backward recurrence) and the previously
sampled latents (forward recurrence). Pre-training maximizes the ELBO:
Itakura-Saito reconstruction plus a KL term against the standard normal
prior, with a linear KL warm-up.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .config import TrainConfig, kl_warmup_weight
from .errors import TrainingDivergedError, UsageError
from .signal_pipeline import StftConfig
from . import training

LOGVAR_MIN = -14.0
LOGVAR_MAX = 14.0
POWER_FLOOR = 1e-10


def make_generator(seed: int) -> torch.Generator:
    """CPU random generator with a fixed seed; all sampling flows from these."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


@dataclass(frozen=True)
class DiagonalGaussianSeq:
    """Per-frame diagonal Gaussian moments, mean and var both (D, T)."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.shape != var.shape or mean.ndim != 2:
            raise ValueError(
                f"mean/var must be matching 2-D arrays, got {mean.shape} vs {var.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("non-finite Gaussian moments")
        if np.any(var <= 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def n_frames(self) -> int:
        return self.mean.shape[1]


class RvaeDecoder(nn.Module):
    """Variance decoder: forward LSTM over latents, log-variance head.

    Strictly causal: the output at frame t is a function of z_{1:t} only.
    """

    def __init__(self, n_freq: int, latent_dim: int, hidden_dim: int):
        super().__init__()
        self.rnn = nn.LSTM(latent_dim, hidden_dim)
        self.logvar_head = nn.Linear(hidden_dim, n_freq)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: (T, B, L) -> positive variances (T, B, F)
        h, _ = self.rnn(z)
        return self.logvar_head(h).clamp(LOGVAR_MIN, LOGVAR_MAX).exp()


class RvaeEncoder(nn.Module):
    """Inference network for q(z_t | z_{1:t-1}, x_{t:T}).

    A backward LSTM over log1p of the observed power gives a summary of
    frames t..T; a forward LSTM consumes the previously sampled latents
    (zero input at t=1); merged features feed mean/log-variance heads.
    """

    def __init__(self, n_freq: int, latent_dim: int, hidden_dim: int):
        super().__init__()
        self.obs_rnn = nn.LSTM(n_freq, hidden_dim)
        self.lat_rnn = nn.LSTM(latent_dim, hidden_dim)
        self.merge = nn.Linear(2 * hidden_dim, hidden_dim)
        self.mean_head = nn.Linear(hidden_dim, latent_dim)
        self.logvar_head = nn.Linear(hidden_dim, latent_dim)
        self.latent_dim = latent_dim

    def _heads(self, obs_feat, lat_feat):
        feat = torch.tanh(self.merge(torch.cat([obs_feat, lat_feat], dim=-1)))
        mean = self.mean_head(feat)
        var = self.logvar_head(feat).clamp(LOGVAR_MIN, LOGVAR_MAX).exp()
        return mean, var

    def _obs_summary(self, obs: torch.Tensor) -> torch.Tensor:
        # run backward in time so position t summarizes obs[t:]
        rev, _ = self.obs_rnn(torch.log1p(obs).flip(0))
        return rev.flip(0)

    def forward(self, obs, generator=None, sample=True):
        """Autoregressive pass over (T, B, F) power frames.

        Returns (mean, var, z), each (T, B, L). With sample=True, z_t is the
        reparameterized draw mean + sqrt(var) * eps fed back into the latent
        recurrence; with sample=False the mean is fed back instead.
        """
        g = self._obs_summary(obs)
        n_frames, batch, _ = obs.shape
        state = None
        z_prev = obs.new_zeros(1, batch, self.latent_dim)
        means, vars_, zs = [], [], []
        for t in range(n_frames):
            out, state = self.lat_rnn(z_prev, state)
            mean, var = self._heads(g[t], out[0])
            if sample:
                eps = torch.randn(
                    mean.shape, generator=generator, dtype=mean.dtype, device="cpu"
                ).to(mean.device)
                z = mean + var.sqrt() * eps
            else:
                z = mean
            means.append(mean)
            vars_.append(var)
            zs.append(z)
            z_prev = z.unsqueeze(0)
        return torch.stack(means), torch.stack(vars_), torch.stack(zs)

    def conditional(self, obs, latents):
        """Per-frame moments with the latent feedback held fixed.

        Computes q's (mean, var) at every frame as a function of the given
        latents (shifted so frame t sees z_{1:t-1}) and of obs frames t..T.
        This exposes the conditional wiring directly, which is what the
        dependency probes need: through the sampled-latent feedback of
        forward(), a perturbation would otherwise reach later frames too.
        """
        g = self._obs_summary(obs)
        shifted = torch.cat(
            [latents.new_zeros(1, *latents.shape[1:]), latents[:-1]], dim=0
        )
        lat_feat, _ = self.lat_rnn(shifted)
        return self._heads(g, lat_feat)


@dataclass
class RvaeParams:
    """Encoder/decoder parameter bundle plus the dims needed to rebuild it."""

    encoder: RvaeEncoder
    decoder: RvaeDecoder
    n_freq: int
    latent_dim: int
    hidden_dim: int


def init_rvae_params(
    n_freq: int,
    latent_dim: int = 16,
    hidden_dim: int = 64,
    seed: int = 0,
    decoder_logvar_bias: float = 0.0,
) -> RvaeParams:
    """Fresh float64 parameters; decoder log-variance bias can be set from a
    data statistic (e.g. log mean power) to start reconstruction near scale."""
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        encoder = RvaeEncoder(n_freq, latent_dim, hidden_dim).double()
        decoder = RvaeDecoder(n_freq, latent_dim, hidden_dim).double()
    bias = float(np.clip(decoder_logvar_bias, LOGVAR_MIN, LOGVAR_MAX))
    with torch.no_grad():
        decoder.logvar_head.bias.fill_(bias)
    return RvaeParams(encoder, decoder, n_freq, latent_dim, hidden_dim)


def _check_power(p: np.ndarray, name: str = "power") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"{name} must be 2-D (F, T), got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(p < 0):
        raise ValueError(f"{name} contains negative entries")
    return p


def decode(z: np.ndarray, params: RvaeParams) -> np.ndarray:
    """Map latents (L, T) to the speech variance sequence (F, T)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != params.latent_dim:
        raise ValueError(
            f"latents must be ({params.latent_dim}, T), got shape {z.shape}"
        )
    if not np.all(np.isfinite(z)):
        raise ValueError("latents contain non-finite entries")
    with torch.no_grad():
        zt = torch.from_numpy(z.T.copy()).unsqueeze(1)
        v = params.decoder(zt)
    return v[:, 0, :].numpy().T


def encode(
    obs_power: np.ndarray, params: RvaeParams, rng: torch.Generator
) -> tuple[DiagonalGaussianSeq, np.ndarray]:
    """Run the autoregressive encoder on an (F, T) power spectrogram.

    Returns the per-frame posterior moments (L, T) and the sampled latent
    sequence (L, T). Deterministic for a given generator state.
    """
    p = _check_power(obs_power, "obs_power")
    with torch.no_grad():
        pt = torch.from_numpy(p.T.copy()).unsqueeze(1)
        mean, var, z = params.encoder(pt, generator=rng)
    q = DiagonalGaussianSeq(
        mean=mean[:, 0, :].numpy().T, var=var[:, 0, :].numpy().T
    )
    return q, z[:, 0, :].numpy().T


def encode_given_latents(
    obs_power: np.ndarray, latents: np.ndarray, params: RvaeParams
) -> DiagonalGaussianSeq:
    """Per-frame posterior moments with the latent feedback path held fixed."""
    p = _check_power(obs_power, "obs_power")
    z = np.asarray(latents, dtype=np.float64)
    if z.shape != (params.latent_dim, p.shape[1]):
        raise ValueError(
            f"latents must be ({params.latent_dim}, {p.shape[1]}), got {z.shape}"
        )
    with torch.no_grad():
        pt = torch.from_numpy(p.T.copy()).unsqueeze(1)
        zt = torch.from_numpy(z.T.copy()).unsqueeze(1)
        mean, var = params.encoder.conditional(pt, zt)
    return DiagonalGaussianSeq(mean=mean[:, 0, :].numpy().T, var=var[:, 0, :].numpy().T)


def kl_to_prior(q: DiagonalGaussianSeq) -> np.ndarray:
    """KL(N(mean_t, diag var_t) || N(0, I)) per frame, shape (T,)."""
    return 0.5 * np.sum(q.var + q.mean ** 2 - 1.0 - np.log(q.var), axis=0)


def is_div(power: np.ndarray, var: np.ndarray) -> float:
    """Itakura-Saito divergence sum_{f,t} (p/v - ln(p/v) - 1).

    Entries with p below the floor use ln(max(p, 1e-10)/v) so zero power
    stays finite; the p/v term is evaluated as given.
    """
    p = np.asarray(power, dtype=np.float64)
    v = np.asarray(var, dtype=np.float64)
    if p.shape != v.shape:
        raise ValueError(f"shape mismatch: power {p.shape} vs var {v.shape}")
    if np.any(v <= 0):
        raise ValueError("var must be strictly positive")
    if np.any(p < 0):
        raise ValueError("power must be nonnegative")
    return float(np.sum(p / v - np.log(np.maximum(p, POWER_FLOOR) / v) - 1.0))


def is_div_t(p: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Torch IS divergence over (T, B, F), summed per sequence -> (B,)."""
    return (p / v - torch.log(p.clamp_min(POWER_FLOOR) / v) - 1.0).sum(dim=(0, 2))


def kl_std_normal_t(mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """Torch KL against N(0, I) over (T, B, L), summed per sequence -> (B,)."""
    return 0.5 * (var + mean ** 2 - 1.0 - torch.log(var)).sum(dim=(0, 2))


def pretrain_elbo_loss(
    clean_power: np.ndarray,
    params: RvaeParams,
    rng: torch.Generator,
    kl_weight: float = 1.0,
    as_tensor: bool = False,
):
    """Negative pre-training ELBO for one sequence, single-sample estimate.

    loss = IS(clean_power, decode(z)) + kl_weight * sum_t KL(q_t || N(0, I))
    with (q, z) drawn by the encoder. With as_tensor=True the differentiable
    scalar is returned instead of a float.
    """
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError(f"kl_weight must be in [0, 1], got {kl_weight}")
    p = _check_power(clean_power, "clean_power")
    pt = torch.from_numpy(p.T.copy()).unsqueeze(1)
    pt = pt.to(next(params.decoder.parameters()).device)
    mean, var, z = params.encoder(pt, generator=rng)
    vs = params.decoder(z)
    loss = (is_div_t(pt, vs) + kl_weight * kl_std_normal_t(mean, var))[0]
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            "non-finite pre-training loss", loss=float(loss.detach())
        )
    return loss if as_tensor else float(loss.detach())


def pretrain(
    manifest,
    cfg: TrainConfig,
    stft_config: StftConfig = StftConfig(),
    init: Checkpoint | None = None,
    device: str = "cpu",
) -> tuple[Checkpoint, list[dict]]:
    """Pre-train the RVAE on clean speech listed in a manifest.

    Uses the train and valid splits, Adam with cosine-annealed learning
    rate, and a linear KL warm-up over cfg.warmup_epochs. The best model by
    validation loss (kl_weight=1) is returned as a checkpoint along with
    the per-epoch history.
    """
    train_segs = training.load_power_segments(manifest, "train", stft_config, cfg.seq_len)
    valid_segs = training.load_power_segments(manifest, "valid", stft_config, cfg.seq_len)

    if init is not None:
        params = rvae_from_checkpoint(init)
        if (params.n_freq, params.latent_dim, params.hidden_dim) != (
            stft_config.n_freq, cfg.latent_dim, cfg.hidden_dim,
        ):
            raise UsageError("init checkpoint dims do not match the training config")
    else:
        mean_power = float(np.mean([s.mean() for s in train_segs]))
        params = init_rvae_params(
            stft_config.n_freq,
            cfg.latent_dim,
            cfg.hidden_dim,
            seed=cfg.seed,
            decoder_logvar_bias=np.log(max(mean_power, POWER_FLOOR)),
        )
    encoder, decoder = params.encoder.to(device), params.decoder.to(device)

    def loss_fn(batch, generator, kl_weight):
        mean, var, z = encoder(batch, generator=generator)
        vs = decoder(z)
        return (is_div_t(batch, vs) + kl_weight * kl_std_normal_t(mean, var)).mean()

    modules = {"encoder": encoder, "decoder": decoder}
    trainable = list(encoder.parameters()) + list(decoder.parameters())
    best_states, history, meta = training.run_epochs(
        train_segs,
        valid_segs,
        loss_fn,
        modules,
        trainable,
        cfg,
        kl_schedule=lambda epoch: kl_warmup_weight(epoch, cfg.warmup_epochs),
        device=device,
    )
    ckpt = Checkpoint(
        role="rvae_pretrained",
        params=best_states,
        stft=stft_config,
        train=cfg,
        meta=meta,
    )
    return ckpt, history


def rvae_from_checkpoint(ckpt: Checkpoint) -> RvaeParams:
    """Rebuild encoder/decoder modules from a checkpoint's tensors."""
    if "encoder" not in ckpt.params or "decoder" not in ckpt.params:
        raise UsageError(
            f"checkpoint with role {ckpt.role!r} does not hold RVAE parameters"
        )
    params = init_rvae_params(
        ckpt.stft.n_freq, ckpt.train.latent_dim, ckpt.train.hidden_dim, seed=0
    )
    training.load_state_from_numpy(params.encoder, ckpt.params["encoder"])
    training.load_state_from_numpy(params.decoder, ckpt.params["decoder"])
    return params
