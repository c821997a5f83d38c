import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from datasetagent import metrics as M
from datasetagent.errors import (
    BothEmpty,
    DegenerateVector,
    EmptyEdgeSet,
    ImageTooSmall,
    IngestMismatch,
    MetricError,
    SampleTooLarge,
    UnsupportedSupport,
)

counts = st.lists(st.integers(0, 500), min_size=1, max_size=12).filter(lambda c: sum(c) > 0)


@settings(max_examples=200)
@given(counts)
def test_cbi_matches_oracle(c):
    assert M.cbi(c) == pytest.approx(oracles.cbi(c), abs=1e-9)
    assert M.cbi(c) >= 0


@settings(max_examples=200)
@given(counts)
def test_pcb_matches_oracle(c):
    assert M.pcb(c) == pytest.approx(oracles.pcb(c), abs=1e-9)
    assert M.pcb(c) <= 1


@settings(max_examples=200)
@given(counts)
def test_dse_matches_oracle_and_is_bounded(c):
    assert M.dse(c) == pytest.approx(oracles.dse(c), abs=1e-9)
    assert 0 <= M.dse(c) <= math.log2(len(c)) + 1e-12


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(1, 50)), min_size=1, max_size=10).filter(lambda r: sum(a for a, _ in r) > 0))
def test_ddc_matches_oracle_and_is_nonnegative(rows):
    p = np.array([a for a, _ in rows], float)
    q = np.array([b for _, b in rows], float)
    p, q = p / p.sum(), q / q.sum()
    assert M.ddc(p, q) == pytest.approx(oracles.ddc(p, q), abs=1e-9)
    assert M.ddc(p, q) >= 0
    assert M.ddc(p, p) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 20000, allow_nan=False), min_size=1, max_size=40))
def test_idde_matches_oracle(areas):
    assert M.idde(areas) == pytest.approx(oracles.idde(areas), abs=1e-9)
    assert M.idde(areas) <= math.log(3) + 1e-12


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_bqi_matches_oracle(ious):
    assert M.bqi(ious) == pytest.approx(oracles.bqi(ious), abs=1e-9)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_osr_matches_oracle(levels):
    assert M.osr(levels) == pytest.approx(oracles.osr(levels), abs=1e-9)
    breakdown = M.occlusion_breakdown(levels)
    assert sum(breakdown.values()) == len(levels)
    assert len(levels) - breakdown["none"] == round(M.osr(levels) * len(levels))


@settings(max_examples=200)
@given(
    arrays(bool, st.tuples(st.integers(1, 8), st.integers(1, 8))),
    st.data(),
)
def test_dice_matches_oracle(a, data):
    b = data.draw(arrays(bool, a.shape))
    if not a.any() and not b.any():
        with pytest.raises(BothEmpty):
            M.acs_dice(a, b)
        return
    assert M.acs_dice(a, b) == pytest.approx(oracles.dice(a.tolist(), b.tolist()), abs=1e-9)
    assert M.acs_dice(a, b) == M.acs_dice(b, a)


@settings(max_examples=200)
@given(st.integers(2, 6), st.integers(1, 6), st.data())
def test_sdi_matches_oracle(n, d, data):
    rows = [data.draw(st.lists(st.floats(0.01, 10), min_size=d, max_size=d)) for _ in range(n)]
    assert M.sdi(rows) == pytest.approx(oracles.sdi(rows), abs=1e-9)


@settings(max_examples=40)
@given(st.integers(11, 15), st.integers(11, 15), st.integers(0, 2**32 - 1))
def test_ssim_matches_windowed_oracle(h, w, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    b = np.clip(a.astype(int) + rng.integers(-40, 41, a.shape), 0, 255).astype(np.uint8)
    assert M.ssim(a, b) == pytest.approx(oracles.ssim(a.tolist(), b.tolist()), abs=1e-6)


@settings(max_examples=60)
@given(st.integers(2, 10), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_esi_matches_pixel_loop(h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w), dtype=np.uint8)
    labels = rng.integers(0, 3, (h, w))
    edges = M.boundary_pixels(labels)
    assert edges.tolist() == oracles.boundary(labels.tolist())
    if not edges.any():
        return
    assert M.esi(img, edges) == pytest.approx(oracles.esi(img.tolist(), edges.tolist()), abs=1e-6)


# ------------------------------------------------------------- spot values


def test_spot_values():
    assert M.cbi([10, 10, 10]) == 0
    assert M.cbi([30, 30, 40]) == pytest.approx(0.047140, abs=1e-6)
    assert M.dse([50, 50]) == pytest.approx(1.0, abs=1e-12)
    assert M.dse([25, 75]) == pytest.approx(0.811278, abs=1e-6)
    assert M.ddc([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.143841, abs=1e-6)
    assert M.sdi([[1, 0], [1, 1]]) == pytest.approx(0.292893, abs=1e-6)
    assert M.bqi([0.8, 0.6, 0.3]) == pytest.approx(0.5)
    assert M.idde([100, 2000, 10000]) == pytest.approx(math.log(3), abs=1e-12)
    assert M.pcb([1, 0]) == pytest.approx(0.5)
    a = np.zeros((4, 4), bool)
    a[:, :2] = True
    b = np.zeros((4, 4), bool)
    b[:2, :] = True
    assert M.acs_dice(a, b) == pytest.approx(0.5)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (20, 24, 3), dtype=np.uint8)
    y = rng.integers(0, 256, (20, 24, 3), dtype=np.uint8)
    assert M.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert M.ssim(x, y) == pytest.approx(M.ssim(y, x), abs=1e-12)
    assert M.ssim(x, y) < 1


def test_sobel_step_response():
    step = np.zeros((5, 6))
    step[:, 3:] = 255
    assert M.gradient_magnitude(step)[2, 3] == pytest.approx(1020)
    assert M.gradient_magnitude(step)[2, 0] == 0


def test_occlusion_buckets_and_area_boundaries():
    assert [M.occlusion_severity(v) for v in (0, 0.1, 0.3, 0.31, 0.6, 0.61)] == [
        "none", "slight", "slight", "partial", "partial", "severe"
    ]
    assert M.area_bucket(32 * 32 - 1) == "small"
    assert M.area_bucket(32 * 32) == "medium"
    assert M.area_bucket(96 * 96) == "medium"
    assert M.area_bucket(96 * 96 + 1) == "large"


def test_bqi_threshold_edges():
    assert M.bqi([0.7]) == 0.5
    assert M.bqi([0.5]) == 0.0
    assert M.bqi([0.7000001]) == 1.0


@pytest.mark.parametrize(
    "call, exc",
    [
        (lambda: M.cbi([]), MetricError),
        (lambda: M.cbi([0, 0]), MetricError),
        (lambda: M.cbi([1, -1, 3]), MetricError),
        (lambda: M.ddc([0.5, 0.5], [1.0, 0.0]), UnsupportedSupport),
        (lambda: M.ddc([0.5, 0.4], [0.5, 0.5]), MetricError),
        (lambda: M.ddc([1.0], [0.5, 0.5]), MetricError),
        (lambda: M.idde([]), MetricError),
        (lambda: M.bqi([]), MetricError),
        (lambda: M.osr([]), MetricError),
        (lambda: M.sdi([[1, 2]]), MetricError),
        (lambda: M.sdi([[0, 0], [1, 1]]), DegenerateVector),
        (lambda: M.acs_dice(np.zeros((2, 2)), np.zeros((2, 3))), MetricError),
        (lambda: M.ssim(np.zeros((10, 10)), np.zeros((10, 10))), ImageTooSmall),
        (lambda: M.ssim(np.zeros((12, 12)), np.zeros((12, 13))), MetricError),
        (lambda: M.esi(np.zeros((4, 4)), np.zeros((4, 4), bool)), EmptyEdgeSet),
    ],
)
def test_metric_errors(call, exc):
    with pytest.raises(exc):
        call()


def test_ddc_zero_prob_in_p_is_fine():
    assert M.ddc([0.0, 1.0], [0.5, 0.5]) == pytest.approx(math.log(2))


def test_histogram_features_shape_and_mass():
    img = np.random.default_rng(1).integers(0, 256, (40, 48, 3), dtype=np.uint8)
    f = M.histogram_features(img)
    assert f.shape == (64,)
    assert f.sum() == 32 * 32


def test_alr_manifest_is_seeded_and_ingest_counts(tmp_path):
    items = [(f"img{i}", "cat") for i in range(20)]
    path = tmp_path / "alr.tsv"
    sample = M.alr_manifest(items, 5, seed=3, path=path)
    assert sample == M.alr_manifest(items, 5, seed=3)
    assert sample != M.alr_manifest(items, 5, seed=4)
    lines = path.read_text().splitlines()
    assert lines[0] == "image_id\tlabel\tverdict" and len(lines) == 6
    verdicts = tmp_path / "v.tsv"
    verdicts.write_text("image_id\tlabel\tverdict\n" + "".join(f"{i}\t{l}\t{'yes' if k else 'no'}\n" for k, (i, l) in enumerate(sample)))
    assert M.alr_ingest(M.read_verdicts(verdicts), sample) == pytest.approx(4 / 5)
    with pytest.raises(SampleTooLarge):
        M.alr_manifest(items, 21, seed=0)
    with pytest.raises(IngestMismatch):
        M.alr_ingest({"stranger": True}, sample)
    bad = tmp_path / "bad.tsv"
    bad.write_text("image_id\tlabel\tverdict\nimg1\tcat\tmaybe\n")
    with pytest.raises(IngestMismatch):
        M.read_verdicts(bad)
