"""Session fixtures: synthetic corpora and the trained models shared by the
integration and acceptance tests. Training runs once per session; sizes are
chosen so the whole suite stays in the tens of minutes on one CPU core."""

import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

import duse
from duse.config import TrainConfig

PRIOR_CFG = TrainConfig(
    epochs=350, hidden_dim=32, latent_dim=8, seq_len=60, batch_size=8, seed=0
)
ND_CFG = TrainConfig(
    epochs=30, hidden_dim=32, latent_dim=8, seq_len=60, batch_size=8, seed=0
)


@pytest.fixture(scope="session")
def train_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_corpus")
    duse.make_toy_corpus(root, n_utts=16, duration_s=3.0, seed=101)
    return root


@pytest.fixture(scope="session")
def eval_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_corpus")
    duse.make_toy_corpus(root, n_utts=10, duration_s=3.0, seed=202, snrs=(0.0,))
    return root


@pytest.fixture(scope="session")
def train_clean_manifest(train_corpus_dir):
    return duse.load_manifest(train_corpus_dir / "clean.tsv")


@pytest.fixture(scope="session")
def train_noisy_manifest(train_corpus_dir):
    return duse.load_manifest(train_corpus_dir / "noisy.tsv")


@pytest.fixture(scope="session")
def eval_noisy_manifest(eval_corpus_dir):
    return duse.load_manifest(eval_corpus_dir / "noisy.tsv")


@pytest.fixture(scope="session")
def eval_clean_manifest(eval_corpus_dir):
    return duse.load_manifest(eval_corpus_dir / "clean.tsv")


@pytest.fixture(scope="session")
def rvae_ckpt(train_clean_manifest):
    ckpt, _ = duse.pretrain(train_clean_manifest, PRIOR_CFG)
    return ckpt


@pytest.fixture(scope="session")
def rvae_ckpt_path(rvae_ckpt, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpts") / "rvae.ckpt"
    duse.save_checkpoint(rvae_ckpt, path)
    return path


@pytest.fixture(scope="session")
def nd_ckpt(train_noisy_manifest, rvae_ckpt):
    ckpt, _ = duse.train_nd(train_noisy_manifest, rvae_ckpt, "no", ND_CFG)
    return ckpt


@pytest.fixture(scope="session")
def nd_ckpt_path(nd_ckpt, tmp_path_factory):
    path = tmp_path_factory.mktemp("nd_ckpts") / "nd_no.ckpt"
    duse.save_checkpoint(nd_ckpt, path)
    return path
