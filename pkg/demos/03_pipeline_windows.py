"""
From raw trial files to 300-step windows
========================================

Writes a small synthetic corpus, preprocesses one trial and shows how the
windowing covers every frame, even for short or uneven trials.
"""
import tempfile
from pathlib import Path

import numpy as np

from afusion.datapipe.logmel import extract_logmel
from afusion.datapipe.records import preprocess_trial
from afusion.datapipe.windows import assemble_batch, make_windows, stitch_predictions
from afusion.synth import SynthSpec, synthesize

tmp = Path(tempfile.mkdtemp())
entries, planted = synthesize(SynthSpec(trials=3, subjects=3, n_frames=517, lengths=(517, 123, 300),
                                        sentinel_rate=0.03, missing_rate=0.02), tmp)
rec = preprocess_trial(entries[0])
print(f"{rec.trial_id}: N={rec.n}, frames {rec.frames.shape}, logmel {rec.logmel.shape}")
print("rows masked by -5 sentinels:", int((~rec.valid_mask).sum()))
print("missing jpgs are zero frames:", all(rec.frames[i].max() == 0 for i in planted[0].missing))

# one log-mel row per video frame: the hop is the frame period
print("440 Hz tone, 30 fps ->", extract_logmel(np.sin(2 * np.pi * 440 * np.arange(16000) / 16000), 30).shape)

# eval windows: hop 200, plus a tail window anchored at N-300
for e in entries:
    r = preprocess_trial(e)
    print(e.trial_id, "N =", r.n, "starts", [w.start for w in make_windows(r)])

batch = assemble_batch({rec.trial_id: rec}, make_windows(rec), ("visual", "audio"), training=False)
print("visual batch", batch.inputs["visual"].shape, "audio batch", batch.inputs["audio"].shape)

# stitching averages overlaps and drops the padding
outs = [(w.start, np.pad(rec.labels[w.start:w.start + w.valid], ((0, 300 - w.valid), (0, 0))))
        for w in make_windows(rec)]
print("stitch(labels) == labels:", np.allclose(stitch_predictions(outs, rec.n), rec.labels))
