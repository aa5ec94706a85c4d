"""Two-stage structured interaction with a multimodal model backend.

Stage one classifies the request and negotiates an optional crop area;
stage two produces the category-specific structured response. All backend
output is schema-validated (schemas ship as versioned documents under
``cospace/data/schemas``); prompts are versioned templates.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
import os
import re
import string
import time
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import jsonschema

from .errors import BackendError, PrivacyViolation, SchemaError, ScenarioError
from .geometry import CameraModel
from .privacy import ConsentDecision, FrameDescription, ImageBuffer, Rect, save_image

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "v1"
PROMPT_VERSION = "v1"

NO_DETECTIONS_MARKER = "(no detections)"


class Category(str, enum.Enum):
    OBJECT_CREATION = "objectCreation"
    ANIMATION_CREATION = "animationCreation"
    SCENE_QUERY = "sceneQuery"
    OTHER = "other"


class Space(str, enum.Enum):
    WORLD = "world"
    LOCAL = "local"
    PIXEL = "pixel"


@dataclass(frozen=True, slots=True)
class UserRequest:
    request_id: str
    user_id: str
    text: str
    fov: FrameDescription
    frame_ref: str | None = None
    camera: CameraModel | None = None
    issued_at: float = 0.0

    def validate(self) -> "UserRequest":
        if not self.text:
            raise ValueError("request text must be nonempty")
        if (self.frame_ref is None) != (self.camera is None):
            raise ValueError("frame_ref and camera must be present together")
        return self


@dataclass(frozen=True, slots=True)
class InitialResponse:
    category: Category
    crop_area: Rect | None


@dataclass(frozen=True, slots=True)
class ObjectCreation:
    prefab_name: str
    space: Space
    position: tuple[float, float, float]
    parent_object: str | None = None


@dataclass(frozen=True, slots=True)
class AnimationCreation:
    action_type: str
    object_name: str
    space: Space
    position: tuple[float, float, float]


@dataclass(frozen=True, slots=True)
class SceneQueryAnswer:
    answer_text: str


RefinedResponse = ObjectCreation | AnimationCreation | SceneQueryAnswer


@lru_cache(maxsize=None)
def _schema(name: str) -> dict:
    path = resources.files("cospace").joinpath(f"data/schemas/{name}.{SCHEMA_VERSION}.json")
    return json.loads(path.read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def _template(name: str) -> string.Template:
    path = resources.files("cospace").joinpath(f"data/prompts/{name}.{PROMPT_VERSION}.txt")
    return string.Template(path.read_text(encoding="utf-8"))


def _validate(payload: dict, schema_name: str) -> None:
    schema = _schema(schema_name)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(payload), key=lambda e: str(e.json_path))
    if errors:
        first = errors[0]
        raise SchemaError(first.message, path=first.json_path)


def _parse_json(raw: str) -> dict:
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc.msg}", path="$") from exc
    if not isinstance(payload, dict):
        raise SchemaError("payload must be a JSON object", path="$")
    return payload


def build_initial_prompt(req: UserRequest) -> str:
    """Deterministic stage-one prompt embedding the FoV summary verbatim."""
    req.validate()
    fov_block = req.fov.text() if len(req.fov) else NO_DETECTIONS_MARKER
    return _template("initial").substitute(user_text=req.text, fov_block=fov_block)


def parse_initial_response(raw: str) -> InitialResponse:
    """Strictly validate and map the stage-one payload."""
    payload = _parse_json(raw)
    _validate(payload, "initial_response")
    area = payload["CropArea"]
    crop: Rect | None = None
    if isinstance(area, list):
        try:
            crop = Rect(area[0], area[1], area[2], area[3]).validate()
        except ValueError as exc:
            raise SchemaError(str(exc), path="$.CropArea") from exc
    return InitialResponse(category=Category(payload["category"]), crop_area=crop)


_REFINED_SCHEMA = {
    Category.OBJECT_CREATION: "refined_object_creation",
    Category.ANIMATION_CREATION: "refined_animation_creation",
    Category.SCENE_QUERY: "refined_scene_query",
    Category.OTHER: "refined_scene_query",
}
_REFINED_TEMPLATE = {
    Category.OBJECT_CREATION: "refined_object_creation",
    Category.ANIMATION_CREATION: "refined_animation_creation",
    Category.SCENE_QUERY: "refined_scene_query",
    Category.OTHER: "refined_scene_query",
}


def build_refined_prompt(
    req: UserRequest,
    initial: InitialResponse,
    crop: ImageBuffer | None,
    consent: ConsentDecision | None,
    accepts_images: bool,
) -> tuple[str, bytes | None]:
    """Stage-two prompt, optionally with the approved crop attached.

    Attaching pixels without a matching approved consent decision is a
    hard failure, not a fallback: raises :class:`PrivacyViolation`.
    """
    req.validate()
    attachment: bytes | None = None
    if crop is not None:
        if (
            consent is None
            or not consent.approved
            or consent.request_id != req.request_id
        ):
            raise PrivacyViolation(
                f"crop for request {req.request_id} lacks an approved consent decision"
            )
        if accepts_images:
            attachment = save_image(crop)
            crop_note = "A user-approved crop of the frame is attached."
        else:
            crop_note = "A crop was approved but this backend accepts text only."
    else:
        crop_note = "No frame pixels are attached; rely on the detection text."
    fov_block = req.fov.text() if len(req.fov) else NO_DETECTIONS_MARKER
    prompt = _template(_REFINED_TEMPLATE[initial.category]).substitute(
        user_text=req.text, fov_block=fov_block, crop_note=crop_note
    )
    return prompt, attachment


def parse_refined_response(raw: str, category: Category) -> RefinedResponse:
    """Validate the stage-two payload against its category schema."""
    payload = _parse_json(raw)
    _validate(payload, _REFINED_SCHEMA[category])
    if category is Category.OBJECT_CREATION:
        return ObjectCreation(
            prefab_name=payload["prefabName"],
            space=Space(payload["space"]),
            position=tuple(float(v) for v in payload["position"]),
            parent_object=payload.get("parentObject"),
        )
    if category is Category.ANIMATION_CREATION:
        return AnimationCreation(
            action_type=payload["actionType"],
            object_name=payload["objectName"],
            space=Space(payload["space"]),
            position=tuple(float(v) for v in payload["position"]),
        )
    return SceneQueryAnswer(answer_text=payload["answerText"])


def refined_to_payload(resp: RefinedResponse) -> dict:
    """Serialized form; parse_refined_response inverts this exactly."""
    if isinstance(resp, ObjectCreation):
        return {
            "prefabName": resp.prefab_name,
            "space": resp.space.value,
            "position": list(resp.position),
            "parentObject": resp.parent_object,
        }
    if isinstance(resp, AnimationCreation):
        return {
            "actionType": resp.action_type,
            "objectName": resp.object_name,
            "space": resp.space.value,
            "position": list(resp.position),
        }
    return {"answerText": resp.answer_text}


@dataclass(frozen=True, slots=True)
class ExpectedRefined:
    """Ground truth for one refined-stage trial targeting pixel space."""

    name: str  # expected prefab name or action type
    bbox: tuple[float, float, float, float]
    object_name: str | None = None  # animations only
    bbox_scale: float = 1.5


def evaluate_refined(response: RefinedResponse, expected: ExpectedRefined) -> bool:
    """Success rule: right names, pixel space, position inside the scaled box.

    The box is scaled about its center; the boundary counts as inside.
    """
    if isinstance(response, ObjectCreation):
        if response.prefab_name.lower() != expected.name.lower():
            return False
        space, position = response.space, response.position
    elif isinstance(response, AnimationCreation):
        if response.action_type.lower() != expected.name.lower():
            return False
        if (
            expected.object_name is not None
            and response.object_name.lower() != expected.object_name.lower()
        ):
            return False
        space, position = response.space, response.position
    else:
        return False
    if space is not Space.PIXEL:
        return False
    left, top, right, bottom = expected.bbox
    cx, cy = (left + right) / 2.0, (top + bottom) / 2.0
    hw = (right - left) / 2.0 * expected.bbox_scale
    hh = (bottom - top) / 2.0 * expected.bbox_scale
    x, y = position[0], position[1]
    return (cx - hw) <= x <= (cx + hw) and (cy - hh) <= y <= (cy + hh)


def classification_accuracy(trials: list[tuple[str, str]]) -> float:
    """Exact-match fraction over (expected, got) category pairs."""
    if not trials:
        raise ValueError("trials must be nonempty")
    hits = sum(1 for expected, got in trials if expected == got)
    return hits / len(trials)


class TransportFailure(Exception):
    """One failed backend attempt; retried per policy before BackendError."""


@dataclass(frozen=True, slots=True)
class RetryPolicy:
    retries: int = 2
    backoffs_s: tuple[float, ...] = (1.0, 2.0)

    def backoff_for(self, attempt: int) -> float:
        if not self.backoffs_s:
            return 0.0
        return self.backoffs_s[min(attempt, len(self.backoffs_s) - 1)]


@dataclass(frozen=True, slots=True)
class BackendReply:
    raw: str
    delay_s: float = 0.0
    fail: bool = False


@dataclass
class MockRule:
    pattern: re.Pattern
    response: str
    delay_s: float = 0.0
    fail_times: int = 0


class MockBackend:
    """Scenario-scripted backend: ordered (pattern -> response) rules.

    Deterministic: the first matching rule answers; a rule's
    ``fail_times`` budget makes that many matching calls fail with a
    transport error before responses flow (exercises the retry policy).
    """

    def __init__(self, rules: list[MockRule], identity: str = "mock", accepts_images: bool = True):
        self.identity = identity
        self.accepts_images = accepts_images
        self._rules = rules
        self.calls: list[tuple[str, bytes | None]] = []  # instrumented upload sink

    @classmethod
    def from_file(cls, path, **kwargs) -> "MockBackend":
        import yaml

        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        return cls.from_config(doc, **kwargs)

    @classmethod
    def from_config(cls, doc, **kwargs) -> "MockBackend":
        if not isinstance(doc, list):
            raise ScenarioError("backend script must be a list of rules")
        rules = []
        for i, entry in enumerate(doc):
            if "match" not in entry or "response" not in entry:
                raise ScenarioError(f"rule {i} needs 'match' and 'response'")
            response = entry["response"]
            if not isinstance(response, str):
                response = json.dumps(response, sort_keys=True, separators=(",", ":"))
            rules.append(
                MockRule(
                    pattern=re.compile(entry["match"], re.DOTALL),
                    response=response,
                    delay_s=float(entry.get("delay", 0.0)),
                    fail_times=int(entry.get("fail_times", 0)),
                )
            )
        return cls(rules, **kwargs)

    def respond(self, prompt: str, attachment: bytes | None = None) -> BackendReply:
        """Scripted reply plus its scheduled delay; no real time passes here."""
        self.calls.append((prompt, attachment))
        for rule in self._rules:
            if rule.pattern.search(prompt):
                if rule.fail_times > 0:
                    rule.fail_times -= 1
                    return BackendReply(raw="", delay_s=rule.delay_s, fail=True)
                return BackendReply(raw=rule.response, delay_s=rule.delay_s)
        raise ScenarioError(f"no backend rule matches prompt starting {prompt[:60]!r}")

    def complete(self, prompt: str, attachment: bytes | None = None) -> str:
        reply = self.respond(prompt, attachment)
        if reply.delay_s > 0:
            time.sleep(reply.delay_s)
        if reply.fail:
            raise TransportFailure("scripted transport failure")
        return reply.raw


class ExternalBackend:
    """OpenAI-compatible chat-completions adapter.

    Credentials and endpoint come from the environment
    (``COSPACE_BACKEND_URL``, ``COSPACE_API_KEY``, ``COSPACE_MODEL``);
    excluded from the default test suite, which is network-free.
    """

    def __init__(
        self,
        url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        accepts_images: bool = True,
        timeout_s: float = 60.0,
    ):
        self._url = url or os.environ.get("COSPACE_BACKEND_URL", "")
        self._api_key = api_key or os.environ.get("COSPACE_API_KEY", "")
        self.identity = model or os.environ.get("COSPACE_MODEL", "gpt-4o")
        self.accepts_images = accepts_images
        self._timeout_s = timeout_s
        if not self._url:
            raise BackendError("external backend needs COSPACE_BACKEND_URL")

    def complete(self, prompt: str, attachment: bytes | None = None) -> str:
        import requests

        content: list | str
        if attachment is not None:
            encoded = base64.b64encode(attachment).decode("ascii")
            content = [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": f"data:application/octet-stream;base64,{encoded}"}},
            ]
        else:
            content = prompt
        try:
            resp = requests.post(
                self._url.rstrip("/") + "/chat/completions",
                headers={"Authorization": f"Bearer {self._api_key}"},
                json={
                    "model": self.identity,
                    "messages": [{"role": "user", "content": content}],
                    "response_format": {"type": "json_object"},
                },
                timeout=self._timeout_s,
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except Exception as exc:  # any transport or payload trouble is retryable
            raise TransportFailure(str(exc)) from exc


@dataclass(frozen=True, slots=True)
class TimedResult:
    raw: str
    generation_time_s: float


def timed_call(
    backend,
    prompt: str,
    attachment: bytes | None = None,
    policy: RetryPolicy = RetryPolicy(),
    clock=time.monotonic,
    sleep=time.sleep,
) -> TimedResult:
    """Call the backend under the retry policy, timing the whole exchange."""
    start = clock()
    attempts = policy.retries + 1
    for attempt in range(attempts):
        try:
            raw = backend.complete(prompt, attachment)
            return TimedResult(raw=raw, generation_time_s=clock() - start)
        except TransportFailure as exc:
            if attempt + 1 >= attempts:
                raise BackendError(
                    f"backend {getattr(backend, 'identity', '?')} failed after {attempts} attempts: {exc}"
                ) from exc
            sleep(policy.backoff_for(attempt))
    raise AssertionError("unreachable")
