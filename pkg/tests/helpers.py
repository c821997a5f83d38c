"""Shared builders for pipeline-level tests."""

from __future__ import annotations

from pathlib import Path

from datasetagent.acquisition import SourceDescriptor
from datasetagent.cli import offline_text_reply
from datasetagent.gateway import MockTransport, make_backends
from datasetagent.pipeline import RunConfig, open_run
from datasetagent.spec_intake import DatasetSpec, parse_demand
from datasetagent.supervision import NO_FAULTS


def mock_backends(replies=None):
    return make_backends(mock=True, mock_transport=MockTransport(replies or {}, fallback=offline_text_reply))


def quiet(*_args, **_kwargs):
    pass


def spec_for(demand: str, corpus: Path, backends=None, root=None) -> DatasetSpec:
    backends = backends or mock_backends()
    spec = parse_demand(demand, backends.text, dataset_root=root, source=SourceDescriptor.infer(corpus))
    assert isinstance(spec, DatasetSpec), spec
    return spec


def run_to_end(workspace: Path, spec: DatasetSpec, corpus: Path, run_id="run", config=None, backends=None, faults=NO_FAULTS, meta=None, out=quiet):
    config = config or RunConfig(mock=True, batch_size=8)
    backends = backends or mock_backends()
    run = open_run(workspace, spec, config, backends, SourceDescriptor.infer(corpus), run_id, meta, faults, out)
    try:
        run.start()
        run.execute()
    finally:
        run.close()
    return run
