"""Unsupervised speech enhancement with a recurrent variational clean-speech
prior and learned dynamical noise variance models."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .corpus import ManifestEntry, load_manifest, make_toy_corpus, mix_at_snr, save_manifest
from .enhancement import (
    EnhancementMode,
    JointParams,
    PosteriorEstimate,
    enhance,
    enhancement_elbo_loss,
    fine_tune_nda,
    fit_na,
    joint_from_checkpoint,
    train_nd,
    wiener_posterior,
)
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    CorruptCheckpointError,
    DuseError,
    InputTooShortError,
    ManifestError,
    TrainingDivergedError,
    UsageError,
)
from .evaluation import EvalReport, evaluate, external_metric, rtf, si_sdr
from .noise_model import (
    NoiseVariant,
    init_noise_params,
    noise_from_checkpoint,
    noise_variance,
)
from .signal_pipeline import (
    ComplexSpectrogram,
    StftConfig,
    Waveform,
    istft,
    power,
    read_wav,
    rescale,
    sine_window,
    split_frames,
    stft,
    vad_trim,
    write_wav,
)
from .speech_prior import (
    RvaeParams,
    decode,
    encode,
    init_rvae_params,
    is_div,
    kl_to_prior,
    make_generator,
    pretrain,
    pretrain_elbo_loss,
    rvae_from_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CheckpointVersionError",
    "ComplexSpectrogram",
    "CorruptCheckpointError",
    "DuseError",
    "EnhancementMode",
    "EvalReport",
    "InputTooShortError",
    "JointParams",
    "ManifestEntry",
    "ManifestError",
    "NoiseVariant",
    "PosteriorEstimate",
    "RvaeParams",
    "StftConfig",
    "TrainConfig",
    "TrainingDivergedError",
    "UsageError",
    "Waveform",
    "decode",
    "encode",
    "enhance",
    "enhancement_elbo_loss",
    "evaluate",
    "external_metric",
    "fine_tune_nda",
    "fit_na",
    "init_noise_params",
    "init_rvae_params",
    "is_div",
    "istft",
    "joint_from_checkpoint",
    "kl_to_prior",
    "load_checkpoint",
    "load_manifest",
    "make_generator",
    "make_toy_corpus",
    "mix_at_snr",
    "noise_from_checkpoint",
    "noise_variance",
    "power",
    "pretrain",
    "pretrain_elbo_loss",
    "read_wav",
    "rescale",
    "rtf",
    "rvae_from_checkpoint",
    "save_checkpoint",
    "save_manifest",
    "si_sdr",
    "sine_window",
    "split_frames",
    "stft",
    "train_nd",
    "vad_trim",
    "wiener_posterior",
    "write_wav",
]
