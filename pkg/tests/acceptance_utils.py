"""Cached corpora and training runs shared by the acceptance tests.

Training the full variant/seed matrix takes a couple of hours on one core,
so finished runs are kept under .acceptance_cache/ in the repository root
and reused across sessions. Corpus caches are stamped with a hash of the
generator source; checkpoint caches are validated against the expected
configuration on load. Delete .acceptance_cache/ to force a cold rebuild.
"""

import hashlib
import pathlib
import shutil
import time

import torch

from prosotron import corpus, experiments, trainer
from prosotron.config import TrainConfig

torch.set_num_threads(1)

CACHE_ROOT = pathlib.Path(__file__).resolve().parent.parent / ".acceptance_cache"

TRAIN_STEPS = 4000
SEEDS = (0, 1, 2)

# half-width model: keeps a ten-run matrix inside a few CPU-hours
HALF_SIZE = dict(
    d_e=128,
    decoder_dim=128,
    attn_dim=64,
    speaker_dim=32,
    prenet_hidden=128,
    prenet_out=64,
    postnet_hidden=64,
    reference_stack="small",
    batch_size=16,
    learning_rate=1e-3,
    max_steps=TRAIN_STEPS,
)

# (variant, normalize, seed); seed-0 runs first so a warm-up pass can be
# inspected before the rest of the matrix finishes
MATRIX = [
    ("speech_side", True, 0),
    ("text_side", True, 0),
    ("baseline", False, 0),
    ("speech_side", False, 0),
    ("speech_side", True, 1),
    ("text_side", True, 1),
    ("baseline", False, 1),
    ("speech_side", True, 2),
    ("text_side", True, 2),
    ("baseline", False, 2),
]


def _fingerprint(module, **kwargs) -> str:
    src = pathlib.Path(module.__file__).read_bytes()
    return hashlib.sha256(src).hexdigest()[:16] + " " + repr(sorted(kwargs.items()))


def _ensure_corpus(name: str, **kwargs) -> pathlib.Path:
    root = CACHE_ROOT / name
    manifest = root / "manifest.txt"
    stamp = root / "cache-stamp.txt"
    want = _fingerprint(corpus, **kwargs)
    if manifest.exists() and stamp.exists() and stamp.read_text() == want:
        return manifest
    if root.exists():
        shutil.rmtree(root)
    made = corpus.make_corpus(root, **kwargs)
    stamp.write_text(want)
    return made


def train_manifest() -> pathlib.Path:
    return _ensure_corpus(
        "corpus_train", n_utterances=96, n_speakers=2, seed=101,
        min_frames=160, max_frames=256,
    )


def eval_manifest() -> pathlib.Path:
    """Same generator distribution, disjoint seed: held-out utterances."""
    return _ensure_corpus(
        "corpus_eval", n_utterances=12, n_speakers=2, seed=202,
        min_frames=160, max_frames=256,
    )


def melody_manifest() -> pathlib.Path:
    root = CACHE_ROOT / "melodies"
    manifest = root / "manifest.txt"
    stamp = root / "cache-stamp.txt"
    want = _fingerprint(experiments, n_melodies=5, seed=100, n_frames=192)
    if manifest.exists() and stamp.exists() and stamp.read_text() == want:
        return manifest
    if root.exists():
        shutil.rmtree(root)
    made = experiments.make_melodies(root, n_melodies=5, seed=100, n_frames=192)
    stamp.write_text(want)
    return made


def run_config(variant: str, normalize: bool, seed: int) -> TrainConfig:
    return TrainConfig(variant=variant, normalize=normalize, seed=seed, **HALF_SIZE)


def run_name(variant: str, normalize: bool, seed: int) -> str:
    tag = "norm" if normalize else "raw"
    return f"{variant}-{tag}-s{seed}"


def ensure_run(variant: str, normalize: bool, seed: int) -> pathlib.Path:
    """Return the checkpoint for one matrix cell, training it if absent."""
    cfg = run_config(variant, normalize, seed)
    out = CACHE_ROOT / "runs" / run_name(variant, normalize, seed)
    ck = out / "checkpoint.pt"
    if ck.exists():
        try:
            trainer.load_checkpoint(ck, expected_cfg=cfg)
            return ck
        except Exception:
            shutil.rmtree(out)
    result = trainer.train(cfg, train_manifest(), out, log_every=250)
    return result.checkpoint_path


def ensure_all(progress=print) -> None:
    train_manifest()
    eval_manifest()
    melody_manifest()
    for variant, normalize, seed in MATRIX:
        t0 = time.time()
        ck = ensure_run(variant, normalize, seed)
        progress(f"{run_name(variant, normalize, seed)}: ready in {time.time() - t0:.0f}s at {ck}")


if __name__ == "__main__":
    ensure_all()
