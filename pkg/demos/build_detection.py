"""Build a small detection dataset from a synthetic candidate pool, offline.

The pool mixes clean photos with the awkward cases the agents must handle:
an off-topic image, a risky one, a duplicate box, a borderline 0.5 score and
a low score that earns a second, box-prompted look. Run it and read the event
log it prints at the end.

    python demos/build_detection.py
"""

import sys
import tempfile
from pathlib import Path

from datasetagent import synth
from datasetagent.cli import main
from datasetagent.supervision import EventLog

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    corpus = synth.make_corpus(tmp / "pool", ["cat", "dog", "bird"], 12)
    code = main([
        "--task", "build",
        "--demand", "build a detection dataset of cat, dog and bird with 4 images per class in YOLO and COCO format",
        "--corpus", str(corpus), "--mock-backends", "--workspace", str(tmp / "ws"), "--run-id", "demo",
    ])
    if code:
        sys.exit(code)
    print("\nWhat happened, one line per event:")
    for e in EventLog(tmp / "ws" / "demo" / "run.log").events:
        detail = e.payload.get("index", e.payload.get("reason", ""))
        print(f"  {e.seq:3d} {e.agent.value:<10} {e.kind:<15} {detail}")
    out = tmp / "ws" / "demo" / "out"
    print("\nOutput tree:")
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.parent == out:
            print("  ", p.name)
    for d in sorted(q for q in out.iterdir() if q.is_dir()):
        print(f"   {d.name}/ ({len(list(d.iterdir()))} files)")
    print("\nQuality report:")
    print((out / "report.txt").read_text())
