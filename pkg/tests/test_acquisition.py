import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datasetagent.acquisition import (
    Entry,
    Outcome,
    QuotaState,
    SourceDescriptor,
    SourceHandle,
    SourceKind,
    decode_image,
    next_batch,
    open_source,
    plan_batch,
    update_quota,
)
from datasetagent.errors import DecodeFailure, LocatorMissing, UnknownClass
from datasetagent.formats import encode_png

CLASSES = ["a", "b", "c"]


def oracle_plan(hints, position, remaining, in_flight, batch_size, factor):
    """Reference steering: walk entries one at a time from ``position``."""
    taken, skipped, fetched = [], [], {c: 0 for c in CLASSES}
    i = position
    while len(taken) < batch_size and i < len(hints):
        h = hints[i]
        if h is not None:
            if remaining[h] == 0:
                skipped.append(i)
                i += 1
                continue
            if fetched[h] + in_flight[h] >= math.ceil(remaining[h] * factor):
                break
            fetched[h] += 1
        taken.append(i)
        i += 1
    return taken, skipped, i


@settings(max_examples=200)
@given(
    st.lists(st.sampled_from(CLASSES + [None]), max_size=30),
    st.integers(0, 5),
    st.lists(st.integers(0, 4), min_size=3, max_size=3),
    st.lists(st.integers(0, 6), min_size=3, max_size=3),
    st.lists(st.integers(0, 2), min_size=3, max_size=3),
    st.integers(1, 8),
    st.sampled_from([1.0, 1.2, 1.5, 2.0]),
)
def test_plan_batch_matches_oracle(hints, position, accepted, targets, in_flight, batch_size, factor):
    entries = [Entry(i, f"e{i}", f"/nowhere/{i}.png", "s", h) for i, h in enumerate(hints)]
    skipped = []
    handle = SourceHandle(SourceDescriptor(SourceKind.LOCAL_DIR, "/nowhere"), entries, lambda e, why, exc: skipped.append((e.index, why)))
    handle.seek(position)
    quota = QuotaState(dict(zip(CLASSES, targets)), dict(zip(CLASSES, accepted)), in_flight=dict(zip(CLASSES, in_flight)))
    batch = plan_batch(handle, quota, batch_size, factor)
    remaining = {c: max(0, t - a) for c, t, a in zip(CLASSES, targets, accepted)}
    want, want_skipped, end = oracle_plan(hints, min(position, len(hints)), remaining, dict(zip(CLASSES, in_flight)), batch_size, factor)
    assert [e.index for e in batch] == want
    assert skipped == [(i, "quota-full") for i in want_skipped]
    assert handle.position == end


def test_quota_updates_are_pure_and_checked():
    q = QuotaState.for_targets({"a": 2, "b": 1})
    q2 = update_quota(q, "a", Outcome.ACCEPTED)
    assert q.accepted["a"] == 0 and q2.accepted["a"] == 1
    q3 = update_quota(update_quota(q2, "a", "Accepted"), "b", "Rejected")
    assert q3.remaining_all() == {"a": 0, "b": 1}
    assert not q3.satisfied()
    assert update_quota(q3, "b", "Accepted").satisfied()
    assert QuotaState.from_dict(q3.to_dict()).to_dict() == q3.to_dict()
    with pytest.raises(UnknownClass):
        update_quota(q, "zebra", "Accepted")
    with pytest.raises(ValueError):
        update_quota(q, "a", "Maybe")


def test_decode_image_formats_and_failure():
    px = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    assert np.array_equal(decode_image(encode_png(px)), px)
    grey = decode_image(encode_png(px[..., 0]))
    assert grey.shape == (5, 7, 3)
    with pytest.raises(DecodeFailure):
        decode_image(b"\xff\xd8\xff\xe0 truncated")


def _write_pngs(root, names):
    for name in names:
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_png(np.full((4, 4, 3), 7, np.uint8)))


def test_local_dir_order_ids_and_hints(tmp_path):
    _write_pngs(tmp_path, ["b/2.png", "a/1.png", "top.png"])
    (tmp_path / "notes.txt").write_text("ignored")
    h = open_source(SourceDescriptor.infer(tmp_path))
    assert [(e.id, e.class_hint) for e in h.entries] == [("a__1", "a"), ("b__2", "b"), ("top", None)]
    assert [r.index for r in h] == [0, 1, 2]
    assert h.exhausted


def test_manifest_and_url_list_sources(tmp_path):
    _write_pngs(tmp_path, ["x.png"])
    (tmp_path / "bad.jpg").write_bytes(b"junk")
    manifest = tmp_path / "m.tsv"
    manifest.write_text("# comment\nx\tx.png\tsrc1\tcat\nbad\tbad.jpg\n")
    skipped = []
    h = open_source(SourceDescriptor.infer(manifest, "dflt"), lambda e, why, exc: skipped.append((e.id, why)))
    records = list(h)
    assert [(r.id, r.source_id, r.class_hint) for r in records] == [("x", "src1", "cat")]
    assert skipped == [("bad", "decode")] and h.skipped == 1 and h.consumed == 2
    urls = tmp_path / "urls.txt"
    urls.write_text(f"file://{tmp_path / 'x.png'}\tdog\n")
    u = open_source(SourceDescriptor.infer(urls))
    assert u.desc.kind is SourceKind.URL_LIST
    assert [(r.id, r.class_hint) for r in u] == [("u000000", "dog")]
    (tmp_path / "short.tsv").write_text("only-one-column\n")
    with pytest.raises(LocatorMissing):
        open_source(SourceDescriptor.infer(tmp_path / "short.tsv"))
    with pytest.raises(LocatorMissing):
        open_source(SourceDescriptor.infer(tmp_path / "missing"))


def test_next_batch_skips_undecodable_without_counting(tmp_path):
    _write_pngs(tmp_path, ["0.png", "2.png", "3.png"])
    (tmp_path / "1.png").write_bytes(b"junk")
    h = open_source(SourceDescriptor.infer(tmp_path))
    batch = next_batch(h, QuotaState.for_targets({}), 2)
    assert [r.id for r in batch] == ["0", "2"]
    assert h.skipped == 1
    with pytest.raises(ValueError):
        next_batch(h, QuotaState.for_targets({}), 0)


def test_descriptor_roundtrip():
    d = SourceDescriptor(SourceKind.CORPUS_MANIFEST, "/x/m.tsv", "web", 0.5)
    assert SourceDescriptor.from_dict(d.to_dict()) == d
