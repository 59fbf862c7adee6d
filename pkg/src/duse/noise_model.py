"""Deep dynamical noise-variance networks in three dependency variants.

Each variant maps its context to a strictly positive (F, T) noise variance
through recurrent encoders and an MLP head (tanh hidden, linear output)
that emits a log-variance:

  lv    - bidirectional LSTM over the full latent sequence z_{1:T};
  no    - forward LSTM over the past noisy power frames x_{1:t-1}
          (zero frame at t=1, strictly causal);
  nolv  - one forward LSTM over x_{1:t-1} and one over z_{1:t}, merged.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .errors import UsageError
from . import training

LOGVAR_MIN = -14.0
LOGVAR_MAX = 14.0


class NoiseVariant(str, Enum):
    LV = "lv"
    NO = "no"
    NOLV = "nolv"


@dataclass(frozen=True)
class NoiseContext:
    """Inputs available to the noise net; which are required depends on variant."""

    noisy_power: np.ndarray | None = None  # (F, T)
    latents: np.ndarray | None = None      # (L, T)


class _MlpHead(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, n_freq: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.Tanh(),
            nn.Linear(hidden_dim, n_freq),
        )

    def forward(self, feat):
        return self.net(feat).clamp(LOGVAR_MIN, LOGVAR_MAX).exp()

    @property
    def output_layer(self) -> nn.Linear:
        return self.net[-1]


def _shift_right(x: torch.Tensor) -> torch.Tensor:
    # frame t sees inputs 1..t-1; a zero frame stands in at t=1
    return torch.cat([x.new_zeros(1, *x.shape[1:]), x[:-1]], dim=0)


class NoNoiseNet(nn.Module):
    needs_obs, needs_latents = True, False

    def __init__(self, n_freq: int, hidden_dim: int):
        super().__init__()
        self.x_rnn = nn.LSTM(n_freq, hidden_dim)
        self.head = _MlpHead(hidden_dim, hidden_dim, n_freq)

    def forward(self, noisy_power=None, latents=None):
        h, _ = self.x_rnn(_shift_right(torch.log1p(noisy_power)))
        return self.head(h)


class LvNoiseNet(nn.Module):
    needs_obs, needs_latents = False, True

    def __init__(self, n_freq: int, latent_dim: int, hidden_dim: int):
        super().__init__()
        self.z_rnn = nn.LSTM(latent_dim, hidden_dim, bidirectional=True)
        self.head = _MlpHead(2 * hidden_dim, hidden_dim, n_freq)

    def forward(self, noisy_power=None, latents=None):
        h, _ = self.z_rnn(latents)
        return self.head(h)


class NolvNoiseNet(nn.Module):
    needs_obs, needs_latents = True, True

    def __init__(self, n_freq: int, latent_dim: int, hidden_dim: int):
        super().__init__()
        self.x_rnn = nn.LSTM(n_freq, hidden_dim)
        self.z_rnn = nn.LSTM(latent_dim, hidden_dim)
        self.head = _MlpHead(2 * hidden_dim, hidden_dim, n_freq)

    def forward(self, noisy_power=None, latents=None):
        hx, _ = self.x_rnn(_shift_right(torch.log1p(noisy_power)))
        hz, _ = self.z_rnn(latents)
        return self.head(torch.cat([hx, hz], dim=-1))


@dataclass
class NoiseParams:
    """Noise net plus its variant tag and rebuild dims."""

    net: nn.Module
    variant: NoiseVariant
    n_freq: int
    latent_dim: int
    hidden_dim: int


def init_noise_params(
    variant: NoiseVariant | str,
    n_freq: int,
    latent_dim: int,
    hidden_dim: int = 64,
    seed: int = 0,
    init_variance: float = 1.0,
) -> NoiseParams:
    """Fresh float64 noise net.

    The output bias is set to log(init_variance) and the output weights are
    shrunk so the initial variance sits near the requested level: the mean
    of the noisy power for per-utterance fitting, 1.0 for corpus training.
    """
    variant = NoiseVariant(variant)
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        if variant is NoiseVariant.NO:
            net = NoNoiseNet(n_freq, hidden_dim).double()
        elif variant is NoiseVariant.LV:
            net = LvNoiseNet(n_freq, latent_dim, hidden_dim).double()
        else:
            net = NolvNoiseNet(n_freq, latent_dim, hidden_dim).double()
    if init_variance <= 0:
        raise ValueError("init_variance must be positive")
    out = net.head.output_layer
    with torch.no_grad():
        out.weight.mul_(0.1)
        out.bias.fill_(float(np.clip(np.log(init_variance), LOGVAR_MIN, LOGVAR_MAX)))
    return NoiseParams(net, variant, n_freq, latent_dim, hidden_dim)


def _ctx_tensors(variant: NoiseVariant, ctx: NoiseContext, n_freq, latent_dim):
    xt = zt = None
    n_frames = None
    if variant in (NoiseVariant.NO, NoiseVariant.NOLV):
        if ctx.noisy_power is None:
            raise UsageError(f"variant {variant.value!r} requires noisy_power context")
        p = np.asarray(ctx.noisy_power, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != n_freq:
            raise ValueError(f"noisy_power must be ({n_freq}, T), got {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("noisy_power must be finite and nonnegative")
        xt = torch.from_numpy(p.T.copy()).unsqueeze(1)
        n_frames = p.shape[1]
    if variant in (NoiseVariant.LV, NoiseVariant.NOLV):
        if ctx.latents is None:
            raise UsageError(f"variant {variant.value!r} requires latents context")
        z = np.asarray(ctx.latents, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] != latent_dim:
            raise ValueError(f"latents must be ({latent_dim}, T), got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latents must be finite")
        if n_frames is not None and z.shape[1] != n_frames:
            raise ValueError("noisy_power and latents frame counts differ")
        zt = torch.from_numpy(z.T.copy()).unsqueeze(1)
    return xt, zt


def noise_variance(
    variant: NoiseVariant | str, ctx: NoiseContext, params: NoiseParams
) -> np.ndarray:
    """Evaluate the noise variance sequence (F, T) for the given context."""
    variant = NoiseVariant(variant)
    if variant is not params.variant:
        raise UsageError(
            f"params were built for variant {params.variant.value!r}, "
            f"called with {variant.value!r}"
        )
    xt, zt = _ctx_tensors(variant, ctx, params.n_freq, params.latent_dim)
    with torch.no_grad():
        v = params.net(noisy_power=xt, latents=zt)
    return v[:, 0, :].numpy().T


def noise_from_checkpoint(ckpt: Checkpoint) -> NoiseParams:
    """Rebuild the noise net recorded in an nd_trained checkpoint."""
    if "noise" not in ckpt.params or ckpt.variant is None:
        raise UsageError(
            f"checkpoint with role {ckpt.role!r} does not hold a noise model"
        )
    params = init_noise_params(
        ckpt.variant,
        ckpt.stft.n_freq,
        ckpt.train.latent_dim,
        ckpt.train.hidden_dim,
        seed=0,
    )
    training.load_state_from_numpy(params.net, ckpt.params["noise"])
    return params
