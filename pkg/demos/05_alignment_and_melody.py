"""Text-side reference attention, and singing through contour transfer.

The text-side model attends twice: the decoder attends over phonemes
(alignment alpha), and each phoneme attends over the reference recording
(alignment beta). On a well-trained model the two maps trace analogous
paths. Contour transfer swaps the reference for a melody: the model sings
the lyrics to the melody's pitch contour; a baseline without a reference
pathway cannot.
"""

import numpy as np

from common import OUT, demo_checkpoint, demo_manifest
from prosotron import corpus, experiments

manifest = demo_manifest()
utterances = corpus.load_manifest(manifest, n_speakers=2)
text_ck = demo_checkpoint("text_side", normalize=True)

report = experiments.plot_attention(
    text_ck, manifest, utterances[0].id, OUT / "attention"
)
print(f"alignment similarity on {utterances[0].id}: {report.aggregate:.3f} "
      "(decoder map vs reference map, 1.0 = identical shape)")
print(f"maps and images under {OUT}/attention")

melody_manifest = experiments.make_melodies(OUT / "melodies", n_melodies=2, seed=100)
lyrics = utterances[0].phonemes.ids
speech_ck = demo_checkpoint("speech_side", normalize=True)

print("\nsinging the first utterance's phonemes to melody m0000:")
for label, ck in (("speech-side", speech_ck), ("text-side", text_ck)):
    rep = experiments.contour_transfer(
        ck, melody_manifest, "m0000", lyrics, speaker_id=0,
        out_dir=OUT / f"sung_{label.replace('-', '_')}",
    )
    print(f"  {label}: pitch contour correlation with the melody {rep.aggregate:+.3f}")
    for note in rep.notes:
        print(f"    note: {note}")
print(f"\nsung audio under {OUT}/sung_*/ "
      "(a higher correlation means the output follows the tune)")
print("lyrics as a CLI flag: --lyrics '" + " ".join(map(str, lyrics[:6])) + " ...'")
