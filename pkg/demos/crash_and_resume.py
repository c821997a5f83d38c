"""Kill a run part-way through, resume it, and compare with an uninterrupted run.

A fault injector stands in for ``kill -9``: it stops the process at a chosen
file-system operation, sometimes halfway through a log line. Resuming replays
the log, repairs half-published files and carries on. The final manifest hash
matches the control run byte for byte.

    python demos/crash_and_resume.py
"""

import tempfile
from pathlib import Path

from datasetagent import synth
from datasetagent.acquisition import SourceDescriptor
from datasetagent.cli import offline_text_reply
from datasetagent.gateway import MockTransport, make_backends
from datasetagent.pipeline import RunConfig, open_run, output_hash
from datasetagent.spec_intake import parse_demand
from datasetagent.supervision import NO_FAULTS, FaultInjector, InjectedCrash


def run(workspace, run_id, faults=NO_FAULTS):
    r = open_run(workspace, spec, config, backends, source, run_id, faults=faults, out=lambda line: None)
    try:
        r.start()
        r.execute()
    finally:
        if r.log:
            r.log.close()
    return r


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    corpus = synth.make_corpus(tmp / "pool", ["cat", "dog", "bird"], 8)
    backends = make_backends(mock=True, mock_transport=MockTransport(fallback=offline_text_reply))
    source = SourceDescriptor.infer(corpus)
    spec = parse_demand("build an instance segmentation dataset of cat, dog, bird with 5 images per class", backends.text, source=source)
    config = RunConfig(workers=2, batch_size=6, checkpoint_every=4, mock=True)

    counter = FaultInjector()
    run(tmp, "control", counter)
    reference = output_hash(tmp / "control" / "out")
    print(f"control run: {counter.ops} file-system operations, manifest {reference[:16]}")

    for k in (counter.ops // 5, counter.ops // 2, counter.ops - 3):
        run_id = f"killed-at-{k}"
        try:
            run(tmp, run_id, FaultInjector(k, partial_append=True))
        except InjectedCrash:
            print(f"\nkilled at operation {k}")
        resumed = run(tmp, run_id)
        got = output_hash(tmp / run_id / "out")
        verdict = "identical" if got == reference else "DIFFERENT"
        print(f"resumed and finished: manifest {got[:16]} ({verdict})")
