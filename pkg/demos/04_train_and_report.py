"""
Training end to end through the command line
============================================

A few epochs of CAN on a throwaway corpus, then prediction and the results
grid. The model is shrunk so this finishes in well under a minute; the
learning rate is raised because nothing here is pretrained.
"""
import tempfile
from pathlib import Path

from afusion.cli import main

root = Path(tempfile.mkdtemp())
data, store, runs = root / "data", root / "store", root / "runs"

main(["synth", "--out", str(data), "--trials", "4", "--subjects", "4", "--n-frames", "400",
      "--val-subjects", "1", "--test-trials", "1"])
main(["preprocess", "--manifest", str(data / "manifest.jsonl"), "--out", str(store)])
main(["train", "--store", str(store), "--out", str(runs), "--seeds", "1,2",
      "--max-epoch", "6", "--warmup-epochs", "1", "--lr", "1e-3", "--min-lr", "1e-6",
      "--backbone-channels", "8,8,8", "--tcn-levels", "3", "--tcn-channels", "16"])

print((runs / "CAN" / "fold0" / "seed1" / "epoch_log.csv").read_text().splitlines()[0])
print((runs / "CAN" / "fold0" / "selection.json").read_text())

main(["predict", "--checkpoint", str(runs / "CAN" / "fold0" / "seed1" / "best.ackp"),
      "--manifest", str(data / "manifest.jsonl"), "--out", str(root / "pred")])
print((root / "pred" / "t004.csv").read_text().splitlines()[:3])
main(["report", str(runs)])
