"""Score an existing class-per-folder dataset, then grow it and score it again.

The first report describes the dataset as it is. Expansion adds new images at
the dataset's own 32x32 resolution without touching the original files, and
DDC then measures how far the combined class mix drifted from the original.

    python demos/metrics_tour.py
"""

import sys
import tempfile
from pathlib import Path

from datasetagent import synth
from datasetagent.cli import main

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    pets = synth.make_class_dir_dataset(tmp / "pets", ["cat", "dog", "bird"], 6)
    print("== metrics of the existing dataset ==")
    main(["--task", "metrics", "--root", str(pets)])

    print("\n== expanding it with synthetic candidates ==")
    corpus = synth.make_corpus(tmp / "pool", ["cat", "dog", "bird"], 10)
    code = main([
        "--task", "expand", "--demand", "expand pets with 3 new images per class",
        "--root", str(pets), "--corpus", str(corpus), "--mock-backends",
        "--workspace", str(tmp / "ws"), "--run-id", "grow",
    ])
    if code:
        sys.exit(code)
    print("\n== report written for the new images ==")
    print((tmp / "ws" / "grow" / "out" / "report.txt").read_text())
