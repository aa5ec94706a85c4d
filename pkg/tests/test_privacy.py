import sys
import textwrap

import pytest

from cospace.errors import CropError, ScenarioError
from cospace.privacy import (
    ConsentRegistry,
    CropTrial,
    Detection,
    ExternalDetector,
    MockDetector,
    PrivacyLevel,
    PrivacyPolicy,
    Rect,
    crop_frame,
    crop_metrics,
    describe_frame,
    iou,
    load_image,
    parse_description_line,
    parse_frame_corpus,
    privacy_audit,
    save_image,
    synthesize_frame,
)


def det(label="cup", center=(50.0, 50.0), bbox=(40.0, 40.0, 60.0, 60.0), conf=0.9):
    return Detection(label=label, center=center, bbox=bbox, confidence=conf)


# --- frame description -------------------------------------------------------

def test_describe_frame_matches_canonical_listing():
    d = Detection(
        label="keyboard",
        center=(327.80, 352.12),
        bbox=(66.47, 66.03, 589.13, 638.21),
        confidence=0.91,
    )
    out = describe_frame([d])
    assert out.lines == (
        "keyboard, center (327.80, 352.12), box (66.47, 66.03, 589.13, 638.21), confidence 0.91",
    )


def test_describe_frame_empty_is_empty():
    assert len(describe_frame([])) == 0


def test_describe_frame_orders_by_confidence_then_label_then_left():
    a = det(label="mug", conf=0.8)
    b = det(label="cup", conf=0.9)
    c = det(label="cup", conf=0.8, bbox=(10, 40, 30, 60), center=(20, 50))
    out = describe_frame([a, b, c])
    assert [line.split(",")[0] for line in out] == ["cup", "cup", "mug"]
    assert "box (10.00" in out.lines[1]


def test_description_line_round_trips_within_rounding():
    d = det(center=(12.3456, 78.9012), bbox=(1.111, 2.222, 99.999, 88.888), conf=0.375)
    line = describe_frame([d]).lines[0]
    back = parse_description_line(line)
    assert back.label == d.label
    tol = 0.005 + 1e-12  # half-ulp slop at the exact rounding boundary
    assert abs(back.center[0] - d.center[0]) <= tol
    assert abs(back.bbox[2] - d.bbox[2]) <= tol
    assert abs(back.confidence - d.confidence) <= tol


# --- rect / iou -----------------------------------------------------------------

def test_iou_identical_is_one():
    r = Rect(0, 0, 10, 10)
    assert iou(r, r) == 1.0


def test_iou_disjoint_is_zero():
    assert iou(Rect(0, 0, 10, 10), Rect(20, 20, 5, 5)) == 0.0


def test_iou_half_overlap_example():
    got = iou(Rect(0, 0, 10, 10), Rect(5, 0, 10, 10))
    assert abs(got - 50.0 / 150.0) < 1e-12


def test_iou_symmetric_and_monotone():
    a = Rect(0, 0, 10, 10)
    previous = 0.0
    for shift in (9.0, 6.0, 3.0, 0.0):
        b = Rect(shift, 0, 10, 10)
        assert iou(a, b) == iou(b, a)
        assert iou(a, b) >= previous
        previous = iou(a, b)


# --- crops -------------------------------------------------------------------------

def frame_10x10():
    return synthesize_frame("t", 10, 10, channels=1)


def test_identity_crop_copies_frame():
    frame = frame_10x10()
    out = crop_frame(frame, Rect(0, 0, 10, 10))
    assert out == frame


def test_crop_region_is_bit_exact():
    frame = synthesize_frame("x", 100, 100, channels=3)
    out = crop_frame(frame, Rect(10, 10, 20, 20))
    assert (out.width, out.height) == (20, 20)
    stride = 100 * 3
    row5 = frame.data[15 * stride + 10 * 3 : 15 * stride + 30 * 3]
    assert out.data[5 * 20 * 3 : 6 * 20 * 3] == row5


def test_crop_clamps_to_frame_bounds():
    frame = synthesize_frame("y", 100, 100, channels=1)
    out = crop_frame(frame, Rect(95, 95, 20, 20))
    assert (out.width, out.height) == (5, 5)


def test_crop_outside_frame_is_error():
    with pytest.raises(CropError):
        crop_frame(frame_10x10(), Rect(50, 50, 5, 5))


def test_crop_area_never_exceeds_input():
    frame = frame_10x10()
    out = crop_frame(frame, Rect(2, 3, 50, 50))
    assert out.width * out.height <= frame.width * frame.height


def test_image_container_round_trip():
    img = synthesize_frame("z", 17, 9, channels=3)
    assert load_image(save_image(img)) == img


# --- privacy audit --------------------------------------------------------------------

def policy():
    return PrivacyPolicy()


def test_audit_no_crop_sees_all_levels():
    detections = [det(label="face"), det(label="cup")]
    result = privacy_audit(detections, None, policy())
    assert result.highly_present and result.insensitive_present and not result.maybe_present


def test_audit_crop_excluding_sensitive_bbox_clears_flag():
    face = det(label="face", bbox=(0, 0, 20, 20), center=(10, 10))
    cup = det(label="cup", bbox=(50, 50, 70, 70), center=(60, 60))
    crop = Rect(40, 40, 40, 40)
    result = privacy_audit([face, cup], crop, policy())
    assert not result.highly_present and result.insensitive_present


def test_audit_partial_overlap_counts_as_present():
    face = det(label="face", bbox=(0, 0, 20, 20), center=(10, 10))
    crop = Rect(15, 15, 40, 40)
    assert privacy_audit([face], crop, policy()).highly_present


def test_audit_empty_detections_all_false():
    result = privacy_audit([], None, policy())
    assert not (result.insensitive_present or result.maybe_present or result.highly_present)


def test_policy_default_level_for_unknown_labels():
    p = PrivacyPolicy.from_mapping({"face": "highlySensitive"}, default="maybeSensitive")
    assert p.level_for("FACE") is PrivacyLevel.HIGHLY_SENSITIVE
    assert p.level_for("gizmo") is PrivacyLevel.MAYBE_SENSITIVE


# --- crop metrics ----------------------------------------------------------------------

def test_crop_metrics_perfect():
    r = Rect(0, 0, 10, 10)
    trials = [CropTrial(expected=r, returned=r)] * 4 + [CropTrial(None, None)] * 4
    m = crop_metrics(trials)
    assert m.crop_recall == 1.0 and m.crop_fallout == 0.0


def test_crop_metrics_five_of_seven_recall():
    r = Rect(0, 0, 10, 10)
    far = Rect(100, 100, 10, 10)
    trials = [CropTrial(r, r)] * 5 + [CropTrial(r, far)] * 2
    m = crop_metrics(trials)
    assert abs(m.crop_recall - 5 / 7) < 1e-12
    assert m.crop_trials == 7


def test_crop_metrics_fallout_counts_unexpected_rects():
    trials = [CropTrial(None, None)] * 6 + [CropTrial(None, Rect(0, 0, 5, 5))] * 2
    m = crop_metrics(trials)
    assert abs(m.crop_fallout - 0.25) < 1e-12
    assert m.none_trials == 8


def test_crop_metrics_iou_boundary_uses_strict_greater():
    a = Rect(0, 0, 10, 10)
    # Exactly IoU 0.5: 10x10 vs 10x5 overlap... use rects with IoU exactly 1/3.
    b = Rect(5, 0, 10, 10)
    assert iou(a, b) < 0.5
    m = crop_metrics([CropTrial(a, b)])
    assert m.crop_recall == 0.0


def test_crop_metrics_requires_trials():
    with pytest.raises(ValueError):
        crop_metrics([])


# --- consent registry ---------------------------------------------------------------------

def test_consent_single_decision_binds():
    reg = ConsentRegistry()
    reg.open_prompt("r1", ["book"])
    assert reg.is_pending("r1")
    decision = reg.decide("r1", True, now=1.0)
    assert decision.approved and reg.approved_for("r1")
    # A late duplicate keeps the first decision.
    again = reg.decide("r1", False, now=2.0)
    assert again.approved


def test_consent_rejection_blocks_upload():
    reg = ConsentRegistry()
    reg.open_prompt("r2", ["face"])
    reg.decide("r2", False, now=1.0)
    assert not reg.approved_for("r2")


def test_consent_unknown_request_raises():
    reg = ConsentRegistry()
    with pytest.raises(KeyError):
        reg.decide("nope", True, now=0.0)


# --- scenario corpus -------------------------------------------------------------------------

CORPUS = textwrap.dedent(
    """
    # two frames
    frame desk1 640 480
    keyboard 327.80 352.12 66.47 66.03 589.13 638.21 0.91
    cup 100 100 80 80 120 120 0.77

    frame wall1 640 480
    face 320 100 300 80 340 120 0.88
    """
)


def test_parse_frame_corpus():
    frames = parse_frame_corpus(CORPUS)
    assert set(frames) == {"desk1", "wall1"}
    assert frames["desk1"].width == 640
    assert frames["desk1"].detections[0].label == "keyboard"


def test_mock_detector_lookup_and_pixels():
    detector = MockDetector(parse_frame_corpus(CORPUS))
    dets = detector.detect("desk1")
    assert [d.label for d in dets] == ["keyboard", "cup"]
    img = detector.frame_pixels("desk1")
    assert (img.width, img.height) == (640, 480)
    # Deterministic synthesis.
    assert img.data == detector.frame_pixels("desk1").data
    with pytest.raises(ScenarioError):
        detector.detect("missing")


def test_corpus_rejects_detection_before_header():
    with pytest.raises(ScenarioError):
        parse_frame_corpus("cup 1 1 0 0 2 2 0.5")


CHILD = r"""
import sys
for line in sys.stdin:
    parts = line.split()
    if not parts:
        continue
    if parts[0] == "detect":
        print("cup 10 10 5 5 15 15 0.9")
        print("end")
        sys.stdout.flush()
"""


def test_external_detector_adapter(tmp_path):
    script = tmp_path / "child.py"
    script.write_text(CHILD)
    detector = ExternalDetector([sys.executable, str(script)])
    try:
        out = detector.detect("whatever")
        assert len(out) == 1 and out[0].label == "cup"
    finally:
        detector.close()
