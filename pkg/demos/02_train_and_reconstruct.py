"""Train a small speech-side model and resynthesize held-in utterances.

The reconstruction report scores each utterance by mel-cepstral distortion
against the original audio; audio artifacts land next to the report.
"""

from common import OUT, demo_checkpoint, demo_manifest
from prosotron import experiments

checkpoint = demo_checkpoint("speech_side", normalize=True)
out = OUT / "reconstruct"
report = experiments.reconstruct(checkpoint, demo_manifest(), limit=4, out_dir=out)

print("\nper-utterance MCD against the original audio:")
for uid, value in report.per_utterance.items():
    print(f"  {uid}: {value:.4f}")
print(f"mean {report.aggregate:.4f}  (convention: {report.mcd_convention})")

json_path = report.save(out)
print(f"\nreport: {json_path}")
print(f"audio:  {out}/recon_*.wav")
print("equivalent CLI: prosotron reconstruct --checkpoint", checkpoint,
      "--manifest", demo_manifest(), "--out", out, "--limit 4")
