"""Steer synthesis through the prosody embedding.

The speech-side model carries one embedding row per reduced frame block.
This script finds which of the two dimensions tracks pitch, raises it over
the whole utterance, and flattens it, listening to the effect through the
pitch estimator. Uses (or trains) the same checkpoint as demo 02.
"""

import numpy as np
import torch

from common import OUT, demo_checkpoint, demo_manifest
from prosotron import dsp, experiments

checkpoint = demo_checkpoint("speech_side", normalize=True)
model, cfg, utterances, _ = experiments.load_for_eval(checkpoint, demo_manifest())

# which embedding dimension follows the oracle pitch contour?
rows, pitch_blocks = [], []
for utt in utterances:
    with torch.no_grad():
        emb = model.extract_prosody(experiments.reference_tensor(utt, cfg.r))[0].numpy()
    k = min(emb.shape[0], len(utt.oracle.pitch) // cfg.r)
    rows.append(emb[:k])
    pitch_blocks.append(utt.oracle.pitch[: k * cfg.r].reshape(k, cfg.r).mean(axis=1))
emb_mat, pitch_vec = np.concatenate(rows), np.concatenate(pitch_blocks)
corr = [float(np.corrcoef(emb_mat[:, d], pitch_vec)[0, 1]) for d in range(emb_mat.shape[1])]
pitch_dim = int(np.argmax(np.abs(corr)))
print("correlation of each embedding dimension with oracle pitch:",
      [f"{c:+.3f}" for c in corr])
print(f"dimension {pitch_dim} is the pitch dimension")

iqr = float(np.percentile(emb_mat[:, pitch_dim], 75)
            - np.percentile(emb_mat[:, pitch_dim], 25))
utt = utterances[0]

out = OUT / "control"
raise_spec = f"{pitch_dim}:add:{0.5 * iqr:.4f}"
report = experiments.control(checkpoint, demo_manifest(), utt.id, raise_spec, out / "raise")
m = report.metrics
print(f"\nedit '{raise_spec}' on {utt.id}: mean pitch "
      f"{m['original_mean_pitch_hz']:.1f} -> {m['edited_mean_pitch_hz']:.1f} Hz")

with torch.no_grad():
    emb = model.extract_prosody(experiments.reference_tensor(utt, cfg.r))[0].numpy()
flat_spec = f"{pitch_dim}:set:{emb[:, pitch_dim].mean():.4f}"
report = experiments.control(checkpoint, demo_manifest(), utt.id, flat_spec, out / "flat")
m = report.metrics
print(f"edit '{flat_spec}': pitch variance "
      f"{m['original_pitch_variance']:.1f} -> {m['edited_pitch_variance']:.1f} Hz^2 "
      "(flattening the dimension flattens the melody)")
print(f"\naudio, spectrograms, embedding plots and pitch tracks under {out}")
