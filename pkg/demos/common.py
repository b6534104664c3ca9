"""Shared plumbing for the demos: one small corpus and cached training runs.

Artifacts live under demos/out/. Checkpoints are reused across scripts, so
the first demo that needs a given model variant pays its training cost
(about two minutes on one CPU core) and the rest load it.
"""

import pathlib

import torch

from prosotron import corpus, trainer
from prosotron.config import TrainConfig

torch.set_num_threads(1)

OUT = pathlib.Path(__file__).resolve().parent / "out"

SMALL = dict(
    d_e=64,
    decoder_dim=64,
    attn_dim=32,
    speaker_dim=16,
    prenet_hidden=64,
    prenet_out=32,
    postnet_hidden=32,
    reference_stack="small",
    batch_size=8,
    learning_rate=2e-3,
    max_steps=800,
)


def demo_manifest() -> pathlib.Path:
    root = OUT / "corpus"
    manifest = root / "manifest.txt"
    if not manifest.exists():
        print("building a 16-utterance demo corpus under", root)
        corpus.make_corpus(root, n_utterances=16, n_speakers=2, seed=7,
                           min_frames=120, max_frames=200)
    return manifest


def demo_checkpoint(variant: str, normalize: bool = True) -> pathlib.Path:
    run = OUT / f"run_{variant}{'_norm' if normalize else '_raw'}"
    ck = run / "checkpoint.pt"
    if not ck.exists():
        cfg = TrainConfig(variant=variant, normalize=normalize, seed=0, **SMALL)
        print(f"training a small {variant} model for {cfg.max_steps} steps "
              "(about two minutes on one CPU core) ...")
        trainer.train(cfg, demo_manifest(), run, log_every=200)
    return ck
