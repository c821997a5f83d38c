import json

import numpy as np
import pytest

from datasetagent import synth
from datasetagent.annotation import AnnotationSet, Detection
from datasetagent.errors import EmptyDataset, IrrelevantDemand, MalformedBackendReply, UnrecognizedLayout
from datasetagent.formats import emit_coco, emit_semantic_png, emit_voc, emit_yolo, encode_png
from datasetagent.gateway import ModelHandle, ModelKind, MockTransport
from datasetagent.geometry import NormalizedBox
from datasetagent.spec_intake import (
    AnnotationFormat,
    ClarificationRequest,
    ClassDef,
    DatasetSpec,
    QualityConstraints,
    TaskKind,
    TaskType,
    clarification_loop,
    clarify,
    inspect_dataset,
    keyword_extraction,
    parse_demand,
    resolve_expand_target,
    validate_spec,
)
from helpers import mock_backends


def text_backend(replies):
    """A text handle that returns ``replies`` in order, whatever the prompt."""
    queue = list(replies)

    class Scripted:
        calls = 0

        def call(self, handle, request):
            Scripted.calls += 1
            return {"text": queue.pop(0)}

    return ModelHandle(ModelKind.TEXT, "mock://t", Scripted(), backoff_s=0), Scripted


OFFLINE = mock_backends().text


def test_keyword_extraction_common_phrasings():
    doc = keyword_extraction("Build a detection dataset of cat, dog and bird with 20 images per class at 64x64 in YOLO")
    assert doc["task_type"] == "Detection" and doc["task_kind"] == "Build"
    assert [c["name"] for c in doc["classes"]] == ["cat", "dog", "bird"]
    assert doc["per_class_target"] == 20
    assert doc["target_resolution"] == [64, 64]
    assert doc["annotation_formats"] == ["YOLO"]
    assert not keyword_extraction("what's the weather like")["relevant"]


def test_explicit_field_lines_override_prose():
    doc = keyword_extraction("Build an image dataset\nclasses: ant, bee\nper_class_target: 7\ntask_type: panoptic")
    assert [c["name"] for c in doc["classes"]] == ["ant", "bee"]
    assert doc["per_class_target"] == 7 and doc["task_type"] == "PanopticSeg"


def test_parse_demand_offline_defaults():
    spec = parse_demand("classification dataset of ant, bee and wasp, 5 images per class", OFFLINE)
    assert isinstance(spec, DatasetSpec)
    assert spec.class_names() == ["ant", "bee", "wasp"]
    assert spec.targets() == {"ant": 5, "bee": 5, "wasp": 5}
    assert spec.annotation_formats == {AnnotationFormat.CLASS_DIRS}
    assert DatasetSpec.from_dict(spec.to_dict()) == spec


def test_missing_fields_become_clarification_then_resolve():
    req = parse_demand("I need a detection dataset", OFFLINE)
    assert isinstance(req, ClarificationRequest)
    assert req.missing == ("classes", "per_class_target")
    answers = {"classes": "cat, dog", "per_class_target": "3"}
    spec = clarification_loop("I need a detection dataset", OFFLINE, lambda r: {m: answers[m] for m in r.missing})
    assert spec.class_names() == ["cat", "dog"] and spec.per_class_target == 3
    assert clarify("x", {"a": "1"}) == "x\na: 1"


def test_irrelevant_and_empty_demands():
    with pytest.raises(IrrelevantDemand):
        parse_demand("tell me a joke", OFFLINE)
    with pytest.raises(ValueError):
        parse_demand("   ", OFFLINE)


GOOD_REPLY = json.dumps({"relevant": True, "task_kind": "Build", "task_type": "Detection", "classes": [{"name": "cat"}], "per_class_target": 4})


def test_one_repair_round_then_malformed():
    h, counter = text_backend(["not json at all", "```json\n" + GOOD_REPLY + "\n```"])
    assert parse_demand("cat detector dataset", h).class_names() == ["cat"]
    assert counter.calls == 2
    h, counter = text_backend(["nope", "still nope", GOOD_REPLY])
    with pytest.raises(MalformedBackendReply):
        parse_demand("cat detector dataset", h)
    assert counter.calls == 2


def test_schema_invalid_reply_is_repaired():
    bad = json.dumps({"relevant": True, "task_kind": "Build", "task_type": "Sorting", "classes": [], "per_class_target": 4})
    h, _ = text_backend([bad, GOOD_REPLY])
    assert parse_demand("cat dataset", h).task_type is TaskType.DETECTION


def spec(**kw):
    base = dict(task_kind=TaskKind.BUILD, task_type=TaskType.DETECTION, classes=(ClassDef("a", 1), ClassDef("b", 1)), per_class_target=1)
    base.update(kw)
    return DatasetSpec(**base)


@pytest.mark.parametrize(
    "kw, rule",
    [
        ({"classes": ()}, "non-empty"),
        ({"classes": (ClassDef("Cat"), ClassDef("cat "))}, "uniqueness"),
        ({"classes": (ClassDef(" "),)}, "empty-name"),
        ({"classes": (ClassDef("a", -1),)}, "negative-target"),
        ({"per_class_target": 0}, "minimum"),
        ({"task_kind": TaskKind.EXPAND}, "missing-root"),
        ({"task_type": TaskType.CLASSIFICATION, "annotation_formats": frozenset({AnnotationFormat.YOLO})}, "classification-formats"),
        ({"task_type": TaskType.SEMANTIC_SEG, "annotation_formats": frozenset({AnnotationFormat.COCO})}, "segmentation-needs-maskpng"),
        ({"target_resolution": (0, 5)}, "positive"),
        ({"quality_constraints": QualityConstraints(min_confidence=1.5)}, "fraction"),
    ],
)
def test_validate_spec_rules(kw, rule):
    assert rule in {v.rule for v in validate_spec(spec(**kw))}


def test_valid_spec_has_no_violations():
    assert validate_spec(spec()) == []


# ------------------------------------------------------------ dataset layouts


def _png(path, size=(20, 10)):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(np.zeros((size[1], size[0], 3), np.uint8)))


def test_inspect_class_dirs(tmp_path):
    synth.make_class_dir_dataset(tmp_path, ["cat", "dog"], 3)
    meta = inspect_dataset(tmp_path)
    assert meta.layout is AnnotationFormat.CLASS_DIRS and meta.task_type is TaskType.CLASSIFICATION
    assert meta.per_class_counts == {"cat": 3, "dog": 3} and meta.image_count == 6
    assert meta.size_stats["mode"] == [32, 32]
    assert meta.class_distribution() == [0.5, 0.5]


def test_inspect_voc_yolo_coco(tmp_path):
    det = Detection("cat", NormalizedBox(0.1, 0.1, 0.5, 0.5), 0.9)
    voc = tmp_path / "voc"
    _png(voc / "JPEGImages" / "a.png")
    (voc / "Annotations").mkdir()
    (voc / "Annotations" / "a.xml").write_text(emit_voc([det, det], "a.png", 20, 10))
    meta = inspect_dataset(voc)
    assert meta.layout is AnnotationFormat.VOC and meta.per_class_counts == {"cat": 2}

    yolo = tmp_path / "yolo"
    _png(yolo / "images" / "a.png")
    (yolo / "labels").mkdir()
    (yolo / "labels" / "a.txt").write_text(emit_yolo([det], {"dog": 0, "cat": 1}))
    (yolo / "classes.txt").write_text("dog\ncat\n")
    meta = inspect_dataset(yolo)
    assert meta.layout is AnnotationFormat.YOLO and meta.per_class_counts == {"dog": 0, "cat": 1}

    coco = tmp_path / "coco"
    coco.mkdir()
    (coco / "instances.json").write_text(emit_coco([AnnotationSet("a", 20, 10, detections=[det])], ["cat", "dog"]))
    meta = inspect_dataset(coco)
    assert meta.layout is AnnotationFormat.COCO and meta.task_type is TaskType.DETECTION
    assert meta.class_names == ["cat", "dog"] and meta.size_stats["mode"] == [20, 10]


def test_inspect_masks(tmp_path):
    _png(tmp_path / "images" / "a.png", (4, 3))
    (tmp_path / "masks_semantic").mkdir()
    (tmp_path / "masks_semantic" / "a.png").write_bytes(emit_semantic_png(np.array([[0, 1, 1, 2]] * 3)))
    (tmp_path / "classes.txt").write_text("background\nsky\ntree\n")
    meta = inspect_dataset(tmp_path)
    assert meta.task_type is TaskType.SEMANTIC_SEG
    assert meta.class_names == ["background", "sky", "tree"]


def test_inspect_errors(tmp_path):
    with pytest.raises(UnrecognizedLayout):
        inspect_dataset(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(EmptyDataset):
        inspect_dataset(tmp_path / "empty")
    (tmp_path / "junk").mkdir()
    (tmp_path / "junk" / "readme.md").write_text("hi")
    with pytest.raises(UnrecognizedLayout):
        inspect_dataset(tmp_path / "junk")


def test_expand_inherits_from_dataset_and_records_conflicts(tmp_path):
    synth.make_class_dir_dataset(tmp_path, ["cat", "dog"], 2)
    s = spec(task_kind=TaskKind.EXPAND, task_type=TaskType.DETECTION, classes=(ClassDef("cat", 5, ("kitty",)),), per_class_target=5, dataset_root=str(tmp_path))
    new, meta = resolve_expand_target(s, tmp_path, {"target_resolution": [64, 64]})
    assert new.task_type is TaskType.CLASSIFICATION
    assert new.classes == (ClassDef("cat", 5, ("kitty",)), ClassDef("dog", 5))
    assert new.target_resolution == (32, 32)
    assert {v.field for v in meta.conflicts} == {"classes", "target_resolution"}
    with pytest.raises(ValueError):
        resolve_expand_target(spec(), tmp_path)


def test_parse_expand_demand_against_root(tmp_path):
    synth.make_class_dir_dataset(tmp_path / "pets", ["cat", "dog"], 2)
    result = parse_demand("expand pets with 4 new images per class", OFFLINE, dataset_root=tmp_path / "pets")
    assert result.task_kind is TaskKind.EXPAND
    assert result.class_names() == ["cat", "dog"] and result.name == "pets"
    assert parse_demand("expand the dataset", OFFLINE).missing == ("dataset_root", "per_class_target")
