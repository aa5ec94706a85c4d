import json
import time

import pytest

from cospace.errors import BackendError, PrivacyViolation, SchemaError
from cospace.pipeline import (
    AnimationCreation,
    Category,
    ExpectedRefined,
    InitialResponse,
    MockBackend,
    MockRule,
    ObjectCreation,
    RetryPolicy,
    SceneQueryAnswer,
    Space,
    UserRequest,
    build_initial_prompt,
    build_refined_prompt,
    classification_accuracy,
    evaluate_refined,
    parse_initial_response,
    parse_refined_response,
    refined_to_payload,
    timed_call,
)
from cospace.privacy import (
    ConsentDecision,
    Detection,
    Rect,
    describe_frame,
    synthesize_frame,
)
from cospace.geometry import CameraModel, Pose

KEYBOARD_LINE = (
    "keyboard, center (327.80, 352.12), box (66.47, 66.03, 589.13, 638.21), confidence 0.91"
)


def fov(detections=None):
    return describe_frame(detections or [])


def camera():
    return CameraModel(pose=Pose(), horizontal_fov_deg=90, image_width=640, image_height=480)


def request(text="make a cube", with_frame=True, request_id="r1"):
    return UserRequest(
        request_id=request_id,
        user_id="userA",
        text=text,
        fov=fov(
            [
                Detection(
                    label="keyboard",
                    center=(327.80, 352.12),
                    bbox=(66.47, 66.03, 589.13, 638.21),
                    confidence=0.91,
                )
            ]
            if with_frame
            else []
        ),
        frame_ref="desk1" if with_frame else None,
        camera=camera() if with_frame else None,
    )


# --- prompts ------------------------------------------------------------------

def test_initial_prompt_contains_detection_line_verbatim():
    prompt = build_initial_prompt(request())
    assert KEYBOARD_LINE in prompt
    assert "make a cube" in prompt


def test_initial_prompt_marks_empty_fov():
    prompt = build_initial_prompt(request(with_frame=False))
    assert "(no detections)" in prompt


def test_initial_prompt_deterministic():
    assert build_initial_prompt(request()) == build_initial_prompt(request())


def test_request_invariant_frame_and_camera_together():
    with pytest.raises(ValueError):
        UserRequest(
            request_id="r", user_id="u", text="hi", fov=fov(), frame_ref="f1", camera=None
        ).validate()
    with pytest.raises(ValueError):
        UserRequest(
            request_id="r", user_id="u", text="", fov=fov()
        ).validate()


# --- initial response parsing ----------------------------------------------------

def test_parse_initial_none_crop():
    out = parse_initial_response('{"category":"sceneQuery","CropArea":"None"}')
    assert out.category is Category.SCENE_QUERY and out.crop_area is None


def test_parse_initial_null_crop():
    out = parse_initial_response('{"category":"other","CropArea":null}')
    assert out.crop_area is None


def test_parse_initial_array_crop():
    out = parse_initial_response('{"category":"objectCreation","CropArea":[10,20,100,80]}')
    assert out.crop_area == Rect(10, 20, 100, 80)


def test_parse_initial_missing_crop_area_is_schema_error():
    with pytest.raises(SchemaError):
        parse_initial_response('{"category":"objectCreation"}')


def test_parse_initial_rejects_bad_category_and_negative_crop():
    with pytest.raises(SchemaError):
        parse_initial_response('{"category":"sorcery","CropArea":"None"}')
    with pytest.raises(SchemaError):
        parse_initial_response('{"category":"sceneQuery","CropArea":[-1,0,10,10]}')
    with pytest.raises(SchemaError):
        parse_initial_response('{"category":"sceneQuery","CropArea":[0,0,0,10]}')


def test_parse_initial_rejects_non_json():
    with pytest.raises(SchemaError) as err:
        parse_initial_response("I would love to help!")
    assert err.value.path == "$"


# --- refined prompt and privacy gate -------------------------------------------------

def crop_image():
    return synthesize_frame("crop", 20, 20)


def approved(request_id="r1"):
    return ConsentDecision(request_id=request_id, approved=True, decided_at=1.0,
                           shown_detections=["keyboard"])


def rejected(request_id="r1"):
    return ConsentDecision(request_id=request_id, approved=False, decided_at=1.0,
                           shown_detections=["keyboard"])


def initial(category=Category.OBJECT_CREATION, crop=None):
    return InitialResponse(category=category, crop_area=crop)


def test_refined_prompt_text_only():
    prompt, attachment = build_refined_prompt(request(), initial(), None, None, True)
    assert attachment is None
    assert "object creation" in prompt


def test_refined_prompt_attaches_approved_crop():
    prompt, attachment = build_refined_prompt(
        request(), initial(Category.SCENE_QUERY), crop_image(), approved(), True
    )
    assert attachment is not None and attachment.startswith(b"CIMG")
    assert "attached" in prompt


def test_refined_prompt_without_consent_is_privacy_violation():
    with pytest.raises(PrivacyViolation):
        build_refined_prompt(request(), initial(), crop_image(), None, True)
    with pytest.raises(PrivacyViolation):
        build_refined_prompt(request(), initial(), crop_image(), rejected(), True)
    # Consent bound to a different request does not transfer.
    with pytest.raises(PrivacyViolation):
        build_refined_prompt(request(), initial(), crop_image(), approved("other"), True)


def test_refined_prompt_respects_text_only_backend():
    _, attachment = build_refined_prompt(
        request(), initial(), crop_image(), approved(), accepts_images=False
    )
    assert attachment is None


# --- refined response parsing ----------------------------------------------------------

def test_parse_refined_object_creation_pixel_space():
    raw = '{"prefabName":"cube","space":"pixel","position":[327.8,352.1,0]}'
    out = parse_refined_response(raw, Category.OBJECT_CREATION)
    assert out == ObjectCreation("cube", Space.PIXEL, (327.8, 352.1, 0.0), None)


def test_parse_refined_animation():
    raw = '{"actionType":"moveTo","objectName":"cube","space":"world","position":[1,0,2]}'
    out = parse_refined_response(raw, Category.ANIMATION_CREATION)
    assert out == AnimationCreation("moveTo", "cube", Space.WORLD, (1.0, 0.0, 2.0))


def test_parse_refined_two_element_position_is_schema_error():
    raw = '{"prefabName":"cube","space":"pixel","position":[1,2]}'
    with pytest.raises(SchemaError):
        parse_refined_response(raw, Category.OBJECT_CREATION)


def test_parse_refined_scene_query_and_other():
    raw = '{"answerText":"the keyboard is black"}'
    for category in (Category.SCENE_QUERY, Category.OTHER):
        out = parse_refined_response(raw, category)
        assert isinstance(out, SceneQueryAnswer)


def test_refined_round_trips_through_payload():
    responses = [
        ObjectCreation("cube", Space.PIXEL, (1.0, 2.0, 0.0), "desk"),
        AnimationCreation("moveTo", "cube", Space.LOCAL, (0.0, 0.5, 0.0)),
        SceneQueryAnswer("yes"),
    ]
    categories = [Category.OBJECT_CREATION, Category.ANIMATION_CREATION, Category.SCENE_QUERY]
    for resp, category in zip(responses, categories):
        raw = json.dumps(refined_to_payload(resp))
        assert parse_refined_response(raw, category) == resp


# --- refined evaluation ---------------------------------------------------------------------

BBOX = (100.0, 100.0, 200.0, 200.0)


def test_evaluate_success_at_bbox_center():
    resp = ObjectCreation("cube", Space.PIXEL, (150.0, 150.0, 0.0))
    assert evaluate_refined(resp, ExpectedRefined(name="cube", bbox=BBOX))


def test_evaluate_boundary_of_scaled_box_is_success():
    # 1.5x scaling about the center pushes the right edge to 225.
    resp = ObjectCreation("cube", Space.PIXEL, (225.0, 150.0, 0.0))
    assert evaluate_refined(resp, ExpectedRefined(name="cube", bbox=BBOX))
    beyond = ObjectCreation("cube", Space.PIXEL, (225.1, 150.0, 0.0))
    assert not evaluate_refined(beyond, ExpectedRefined(name="cube", bbox=BBOX))


def test_evaluate_wrong_space_fails():
    resp = ObjectCreation("cube", Space.WORLD, (150.0, 150.0, 0.0))
    assert not evaluate_refined(resp, ExpectedRefined(name="cube", bbox=BBOX))


def test_evaluate_names_case_insensitive():
    resp = ObjectCreation("Cube", Space.PIXEL, (150.0, 150.0, 0.0))
    assert evaluate_refined(resp, ExpectedRefined(name="cube", bbox=BBOX))


def test_evaluate_animation_checks_action_and_object():
    resp = AnimationCreation("moveTo", "cube", Space.PIXEL, (150.0, 150.0, 0.0))
    assert evaluate_refined(resp, ExpectedRefined(name="moveto", bbox=BBOX, object_name="CUBE"))
    assert not evaluate_refined(
        resp, ExpectedRefined(name="moveto", bbox=BBOX, object_name="sphere")
    )


# --- metrics -----------------------------------------------------------------------------------

def test_classification_accuracy():
    assert classification_accuracy([("a", "a"), ("b", "b")]) == 1.0
    assert classification_accuracy([("a", "b")]) == 0.0
    trials = [("x", "x")] * 134 + [("x", "y")] * 16
    assert abs(classification_accuracy(trials) - 134 / 150) < 1e-12
    assert round(classification_accuracy(trials) * 100, 2) == 89.33


# --- backends ------------------------------------------------------------------------------------

def test_mock_backend_matches_rules_in_order():
    backend = MockBackend.from_config(
        [
            {"match": "classified as object creation", "response": {"prefabName": "cube", "space": "world", "position": [0, 0, 0], "parentObject": None}},
            {"match": ".*", "response": {"category": "objectCreation", "CropArea": "None"}},
        ]
    )
    first = backend.complete(build_initial_prompt(request()))
    assert json.loads(first)["category"] == "objectCreation"


def test_timed_call_times_scripted_delay():
    backend = MockBackend([MockRule(__import__("re").compile(".*"), '{"x":1}', delay_s=0.005)])
    out = timed_call(backend, "hello")
    assert 0.005 <= out.generation_time_s < 0.05
    assert out.raw == '{"x":1}'


def test_timed_call_retries_then_raises_backend_error():
    import re as _re

    backend = MockBackend([MockRule(_re.compile(".*"), "ok", fail_times=99)])
    sleeps = []
    with pytest.raises(BackendError):
        timed_call(backend, "x", policy=RetryPolicy(), sleep=sleeps.append)
    assert sleeps == [1.0, 2.0]
    assert len(backend.calls) == 3


def test_timed_call_recovers_after_transient_failures():
    import re as _re

    backend = MockBackend([MockRule(_re.compile(".*"), "fine", fail_times=2)])
    sleeps = []
    out = timed_call(backend, "x", sleep=sleeps.append)
    assert out.raw == "fine" and sleeps == [1.0, 2.0]


def test_sequential_timed_calls_have_nonoverlapping_times():
    import re as _re

    backend = MockBackend([MockRule(_re.compile(".*"), "ok")])
    t0 = time.monotonic()
    a = timed_call(backend, "one")
    t1 = time.monotonic()
    b = timed_call(backend, "two")
    assert a.generation_time_s <= t1 - t0
    assert b.generation_time_s >= 0
