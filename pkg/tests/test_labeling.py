import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datasetagent.acquisition import SourceDescriptor, open_source
from datasetagent.analysis import parse_analysis
from datasetagent.annotation import AnnotationSet, Detection, InstanceMask, SegmentationResult
from datasetagent.errors import NoMatchingClass
from datasetagent.geometry import NormalizedBox, iou
from datasetagent.labeling import (
    LabelConfig,
    SegVariant,
    annotate_detection,
    annotate_segmentation,
    assign_class_label,
    dedupe,
    filter_by_confidence,
    item_artifacts,
    mask_problems,
    rasterize,
    transform_annotation,
)
from datasetagent.spec_intake import AnnotationFormat, ClassDef, DatasetSpec, TaskKind, TaskType
from datasetagent.synth import FOX_ANALYSIS, make_corpus
from datasetagent.tools import ToolStep, run_plan
from helpers import mock_backends

CLASSES = ("cat", "dog", "bird")


def spec_for(task_type, classes=CLASSES, formats=(), stuff=()):
    return DatasetSpec(
        TaskKind.BUILD,
        task_type,
        tuple(ClassDef(c, 5, is_thing=c not in stuff) for c in classes),
        5,
        annotation_formats=frozenset(formats),
    )


@st.composite
def detections(draw):
    x1, y1 = draw(st.floats(0, 0.8)), draw(st.floats(0, 0.8))
    w, h = draw(st.floats(0.05, 0.2)), draw(st.floats(0.05, 0.2))
    conf = draw(st.sampled_from([0.0, 0.25, 0.49, 0.5, 0.51, 0.9, 1.0]))
    return Detection(draw(st.sampled_from(CLASSES)), NormalizedBox(x1, y1, x1 + w, y1 + h), conf)


@settings(max_examples=200)
@given(st.lists(detections(), max_size=8), st.sampled_from([0.0, 0.5, 0.9]))
def test_confidence_filter_is_inclusive_and_order_preserving(dets, t):
    kept = filter_by_confidence(dets, t)
    assert kept == [d for d in dets if d.confidence >= t]


def test_confidence_filter_rejects_bad_threshold():
    with pytest.raises(ValueError):
        filter_by_confidence([], 1.5)


@settings(max_examples=200)
@given(st.lists(detections(), max_size=8), st.sampled_from([0.3, 0.5, 0.9]))
def test_dedupe_against_pairwise_oracle(dets, t):
    kept = dedupe(dets, t)
    # no two survivors overlap above the threshold
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i].box, kept[j].box) <= t
    # every dropped box is explained by a survivor at least as confident
    for d in dets:
        if d not in kept:
            assert any(iou(d.box, k.box) > t and k.confidence >= d.confidence for k in kept)
    assert dedupe(kept, t) == kept


def test_assign_class_label():
    s = DatasetSpec(TaskKind.BUILD, TaskType.CLASSIFICATION, (ClassDef("fox", 1, ("vulpes",)),), 1)
    assert assign_class_label(parse_analysis(FOX_ANALYSIS), s) == "fox"
    s2 = DatasetSpec(TaskKind.BUILD, TaskType.CLASSIFICATION, (ClassDef("wolf", 1),), 1)
    with pytest.raises(NoMatchingClass):
        assign_class_label(parse_analysis(FOX_ANALYSIS), s2)


@pytest.fixture(scope="module")
def records(tmp_path_factory):
    manifest = make_corpus(tmp_path_factory.mktemp("lab"), list(CLASSES), 4, seed=2)
    return {r.id: r for r in open_source(SourceDescriptor.infer(manifest))}


def test_gate_keeps_exactly_half_and_drops_below(records):
    b = mock_backends()
    s = spec_for(TaskType.DETECTION)
    gate = annotate_detection(records["img0001"], s, b.grounding)  # scenario "gate": confidence 0.5
    assert [d.confidence for d in gate.detections] == [0.5]
    empty = annotate_detection(records["img0008"], s, b.grounding)  # scenario "empty": confidence 0.2
    assert empty.detections == []


def test_low_score_is_requeried_with_a_box_prompt(records):
    b = mock_backends()
    s = spec_for(TaskType.DETECTION)
    ann = annotate_detection(records["img0002"], s, b.grounding)
    assert [d.confidence for d in ann.detections] == [0.75]
    no_requery = annotate_detection(records["img0002"], s, b.grounding, LabelConfig(requery_floor=0.45))
    assert no_requery.detections == []


def test_duplicates_are_suppressed(records):
    ann = annotate_detection(records["img0005"], spec_for(TaskType.DETECTION), mock_backends().grounding)
    assert [d.confidence for d in ann.detections] == [0.9]


def test_segmentation_renumbers_instances(records):
    ann = annotate_segmentation(records["img0010"], spec_for(TaskType.INSTANCE_SEG), mock_backends().segmentation, SegVariant.INSTANCE)
    ids = [m.instance_id for m in ann.masks.masks]
    assert ids == list(range(1, len(ids) + 1)) and len(ids) == 2


# ------------------------------------------------------------ plan transforms


PLANS = st.lists(
    st.one_of(
        st.builds(lambda: ToolStep("flip_h")),
        st.builds(lambda: ToolStep("flip_v")),
        st.sampled_from([90, 180, 270]).map(lambda d: ToolStep("rotate", {"degrees": d})),
        st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(8, 12), st.integers(8, 12)).map(
            lambda r: ToolStep("crop", {"box": [r[0] / 12, r[1] / 12, r[2] / 12, r[3] / 12]})
        ),
    ),
    max_size=4,
)


@settings(max_examples=150)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(2, 6), st.integers(2, 6), PLANS)
def test_masks_and_boxes_follow_pixels(x0, y0, bw, bh, steps):
    """Oracle: push a marked image through the real tools and compare."""
    H = W = 12
    mask = np.zeros((H, W), bool)
    mask[y0 : y0 + bh, x0 : x0 + bw] = True
    box = NormalizedBox(x0 / W, y0 / H, (x0 + bw) / W, (y0 + bh) / H)
    ann = AnnotationSet("m", W, H, detections=[Detection("cat", box, 1.0)], masks=SegmentationResult([InstanceMask("cat", 1, mask)]))
    pixels = np.repeat(mask[..., None].astype(np.uint8) * 255, 3, axis=2)
    moved_pixels = run_plan(pixels, steps)
    moved = transform_annotation(ann, steps)
    truth = moved_pixels[..., 0] > 0
    assert (moved.width, moved.height) == (truth.shape[1], truth.shape[0])
    if not truth.any():
        assert moved.masks.masks == [] and moved.detections == []
        return
    assert np.array_equal(moved.masks.masks[0].mask, truth)
    ys, xs = np.nonzero(truth)
    want = [xs.min() / truth.shape[1], ys.min() / truth.shape[0], (xs.max() + 1) / truth.shape[1], (ys.max() + 1) / truth.shape[0]]
    assert moved.detections[0].box.as_list() == pytest.approx(want, abs=1e-9)


def test_resize_step_scales_masks_nearest():
    mask = np.zeros((4, 4), bool)
    mask[:2, :2] = True
    ann = AnnotationSet("m", 4, 4, masks=SegmentationResult([InstanceMask("cat", 1, mask)]))
    out = transform_annotation(ann, [ToolStep("resize", {"width": 8, "height": 8})])
    assert out.masks.masks[0].mask.sum() == 16 and (out.width, out.height) == (8, 8)


# ----------------------------------------------------------------- rasterize


def test_rasterize_most_confident_wins_and_stuff_has_no_instance():
    a = np.zeros((4, 4), bool)
    a[:, :3] = True
    b = np.zeros((4, 4), bool)
    b[:, 1:] = True
    ann = AnnotationSet(
        "r", 4, 4,
        masks=SegmentationResult([InstanceMask("cat", 1, a, 0.9), InstanceMask("dog", 2, b, 0.6)]),
    )
    s = spec_for(TaskType.PANOPTIC_SEG, stuff=("dog",))
    out = rasterize(ann, s, SegVariant.PANOPTIC)
    assert out.semantic[0].tolist() == [1, 1, 1, 2]
    assert out.panoptic[0, :, 1].tolist() == [1, 1, 1, 0]
    assert rasterize(ann, s, SegVariant.SEMANTIC).panoptic is None
    assert mask_problems(out) == []


def test_item_artifacts_per_task():
    det = Detection("cat", NormalizedBox(0.1, 0.1, 0.5, 0.5), 0.9)
    px = np.zeros((10, 10, 3), np.uint8)
    ann = AnnotationSet("x", 10, 10, detections=[det])
    s = spec_for(TaskType.DETECTION, formats=(AnnotationFormat.YOLO, AnnotationFormat.VOC, AnnotationFormat.COCO))
    assert sorted(item_artifacts(ann, px, s)) == ["annotations_voc/x.xml", "images/x.png", "labels_yolo/x.txt"]
    cls = AnnotationSet("x", 10, 10, class_label="dog")
    assert sorted(item_artifacts(cls, px, spec_for(TaskType.CLASSIFICATION))) == ["dog/x.png"]
    m = InstanceMask("cat", 1, np.ones((10, 10), bool))
    seg = rasterize(AnnotationSet("x", 10, 10, masks=SegmentationResult([m])), spec_for(TaskType.PANOPTIC_SEG), SegVariant.PANOPTIC)
    assert sorted(item_artifacts(seg, px, spec_for(TaskType.PANOPTIC_SEG, formats=(AnnotationFormat.MASK_PNG,)))) == [
        "images/x.png", "masks_instance/x_1.png", "masks_panoptic/x.png", "masks_semantic/x.png",
    ]
