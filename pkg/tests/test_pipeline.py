import json

import numpy as np
import pytest

from datasetagent.errors import BackendUnavailable, NoCheckpoint, RunAborted
from datasetagent.gateway import MockTransport, make_backends
from datasetagent.cli import offline_text_reply
from datasetagent.pipeline import (
    RunConfig,
    apply_quality,
    config_from_dict,
    load_config,
    load_run,
    make_run_id,
    output_hash,
    reference_image,
)
from datasetagent.supervision import EventLog, sha256_file
from datasetagent.tools import ToolStep
from helpers import mock_backends, run_to_end, spec_for

DETECT = "build a detection dataset of cat, dog and bird with 3 images per class"


def events(run_dir):
    return EventLog(run_dir / "run.log").events


def test_detection_build_end_to_end(tmp_path, small_corpus):
    spec = spec_for(DETECT, small_corpus)
    lines = []
    run = run_to_end(tmp_path, spec, small_corpus, out=lines.append)
    out = run.ws.out
    s = run.state
    assert s.accepted_per_class() == {"cat": 3, "dog": 3, "bird": 3}
    assert lines[-1] == "DatasetAgent: successfully built dataset with 9 high-quality images."
    kinds = [e.kind for e in events(run.ws.root)]
    assert kinds[0] == "RunStarted" and kinds[-1] == "Finalized"
    assert {"ItemRejected", "BatchPlanned", "ItemCommitted"} <= set(kinds)
    meta = json.loads((out / "metadata.json").read_text())
    assert len(meta["images"]) == 9 and meta["seed"] == 0
    for rec in meta["images"]:
        assert (out / rec["file"]).is_file()
        assert (out / "labels_yolo" / f"{rec['id']}.txt").is_file()
        assert all(d["confidence"] >= 0.5 for d in rec["detections"])
    # the manifest lists every other output file with its hash
    listed = dict(line.split("\t") for line in (out / "manifest.tsv").read_text().splitlines())
    files = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {"manifest.tsv"}
    assert set(listed) == files
    assert all(sha256_file(out / rel) == sha for rel, sha in listed.items())
    assert not list(out.rglob("*.tmp"))


def test_outcome_accounting(tmp_path, small_corpus):
    run = run_to_end(tmp_path, spec_for(DETECT, small_corpus), small_corpus)
    s = run.state
    collected = len(s.outcomes)
    assert s.accepted == collected - s.rejected - s.skipped
    assert s.cursor() == collected - 1


def test_same_seed_is_byte_identical_across_worker_counts(tmp_path, small_corpus):
    spec = spec_for(DETECT, small_corpus)
    a = run_to_end(tmp_path / "a", spec, small_corpus, config=RunConfig(mock=True, batch_size=5, workers=1))
    b = run_to_end(tmp_path / "b", spec, small_corpus, config=RunConfig(mock=True, batch_size=5, workers=4))
    assert output_hash(a.ws.out) == output_hash(b.ws.out)


def test_resuming_a_finished_run_is_a_no_op(tmp_path, small_corpus):
    spec = spec_for(DETECT, small_corpus)
    run = run_to_end(tmp_path, spec, small_corpus)
    before = output_hash(run.ws.out)
    n_events = len(events(run.ws.root))
    lines = []
    again = load_run(tmp_path, "run", RunConfig(mock=True), mock_backends(), out=lines.append)
    again.start()
    again.execute()
    again.close()
    assert output_hash(run.ws.out) == before
    assert len(events(run.ws.root)) == n_events
    assert lines[-1].startswith("DatasetAgent: successfully built")
    with pytest.raises(NoCheckpoint):
        load_run(tmp_path, "nope", RunConfig(mock=True), mock_backends())


class Outage(MockTransport):
    """Vision calls fail from the ``after``-th analyze request on, while ``down`` is set."""

    def __init__(self, after, exc=BackendUnavailable):
        super().__init__(fallback=offline_text_reply)
        self.after = after
        self.exc = exc
        self.calls = 0
        self.down = True

    def call(self, handle, request):
        if request.task == "analyze":
            self.calls += 1
            if self.down and self.calls >= self.after:
                raise self.exc("backend went away")
        return super().call(handle, request)


def test_backend_outage_aborts_then_resumes_to_the_same_output(tmp_path, small_corpus):
    spec = spec_for(DETECT, small_corpus)
    control = run_to_end(tmp_path / "c", spec, small_corpus)
    outage = Outage(after=4)
    backends = make_backends(mock=True, mock_transport=outage)
    with pytest.raises(RunAborted):
        run_to_end(tmp_path / "t", spec, small_corpus, backends=backends)
    kinds = [e.kind for e in events(tmp_path / "t" / "run")]
    assert kinds[-2:] == ["Diagnosis", "RunAborted"]
    outage.down = False
    resumed = run_to_end(tmp_path / "t", spec, small_corpus, backends=backends)
    assert "RunResumed" in [e.kind for e in events(resumed.ws.root)]
    assert output_hash(resumed.ws.out) == output_hash(control.ws.out)


def test_interrupt_checkpoints_then_resume_matches(tmp_path, small_corpus):
    spec = spec_for(DETECT, small_corpus)
    control = run_to_end(tmp_path / "c", spec, small_corpus)
    backends = make_backends(mock=True, mock_transport=Outage(after=6, exc=KeyboardInterrupt))
    with pytest.raises(KeyboardInterrupt):
        run_to_end(tmp_path / "t", spec, small_corpus, backends=backends)
    assert events(tmp_path / "t" / "run")[-1].kind == "CheckpointSaved"
    resumed = run_to_end(tmp_path / "t", spec, small_corpus)
    assert output_hash(resumed.ws.out) == output_hash(control.ws.out)


def test_corrupt_image_is_skipped_with_recovery_events(tmp_path, det_corpus):
    spec = spec_for("build a detection dataset of cat, dog and bird with 20 images per class", det_corpus)
    lines = []
    run = run_to_end(tmp_path, spec, det_corpus, out=lines.append)
    log = events(run.ws.root)
    at = next(i for i, e in enumerate(log) if e.kind == "Error")
    assert log[at].payload["category"] == "DecodeFailure"
    assert [e.kind for e in log[at : at + 5]] == ["Error", "CheckpointSaved", "Diagnosis", "ItemSkipped", "Recovered"]
    assert log[at + 4].payload == {"restored_cursor": 28, "skipped": 29, "next_index": 30}
    assert any("skipped image #29" in line for line in lines)


# ----------------------------------------------------------------- config


def test_config_from_dict_and_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(
        '[run]\nworkers = 3\nseed = 9\ninterp = "bilinear"\n'
        "[labeling]\nmin_confidence = 0.6\n"
        "[quality]\nmax_risk_score = 0.4\n"
        '[backends.text]\nendpoint = "http://x"\n'
        "[mock]\nenabled = true\n"
    )
    c = load_config(path)
    assert (c.workers, c.seed, c.interp, c.label.min_confidence, c.mock) == (3, 9, "bilinear", 0.6, True)
    assert c.backends == {"text": {"endpoint": "http://x"}}
    assert load_config(None) == RunConfig()
    with pytest.raises(ValueError):
        config_from_dict({"run": {"wrokers": 2}})
    for bad in ({"workers": 0}, {"batch_size": 0}, {"overcollect_factor": 0.5}, {"interp": "nearest"}):
        with pytest.raises(ValueError):
            RunConfig(**bad)


def test_quality_overrides_and_run_ids(small_corpus):
    spec = spec_for(DETECT, small_corpus)
    assert apply_quality(spec, {"max_risk_score": 0.2}).quality_constraints.max_risk_score == 0.2
    assert apply_quality(spec, {}) is spec
    assert make_run_id(spec, 0, "x") == make_run_id(spec, 0, "x")
    assert make_run_id(spec, 0, "x") != make_run_id(spec, 1, "x")


def test_reference_image_uses_geometry_only():
    src = np.random.default_rng(0).integers(0, 256, (8, 10, 3), dtype=np.uint8)
    steps = [ToolStep("flip_h"), ToolStep("color_normalize"), ToolStep("resize", {"width": 10, "height": 8})]
    assert np.array_equal(reference_image(src, steps, (10, 8)), src[:, ::-1])
    assert reference_image(src, steps, (5, 4)).shape == (4, 5, 3)
