"""Authoritative session core.

Sans-io by design: the core consumes timestamped events from one
serialized queue and returns effects (frames to send, backend calls to
run, timers to start). Shells own the actual I/O — the asyncio TCP/
WebSocket front end for live serving, the virtual-clock loop for
deterministic simulation. All session state is mutated only inside
``on_event``, so any concurrent stimulus set is linearized by queue
order, and every broadcast is built from one consistent state snapshot.
"""

from __future__ import annotations

import base64
import logging
import time
from dataclasses import dataclass, field

from . import pipeline, protocol, sync
from .colocation import (
    AlignmentTransform,
    RegistrationRegistry,
    TagObservation,
    alignment_transform,
    transform_pose_between_users,
)
from .errors import (
    BroadcastError,
    CropError,
    FramingError,
    NotFound,
    PrivacyViolation,
    RegistrationFailed,
    SchemaError,
    ScenarioError,
)
from .geometry import (
    CameraModel,
    EnvironmentMesh,
    Pose,
    Vec3,
    raycast,
    unproject,
)
from .privacy import (
    ConsentRegistry,
    Detection,
    ImageBuffer,
    PrivacyPolicy,
    Rect,
    crop_frame,
    describe_frame,
    save_image,
    _overlaps,
)

logger = logging.getLogger(__name__)

DEFAULT_KEYWORD_POOL = (
    "aurora", "breeze", "comet", "dune", "ember", "fjord", "glacier", "harbor",
    "island", "juniper", "koi", "lagoon", "meadow", "nebula", "orchid", "prairie",
)

STAGE_INITIAL = "initial"
STAGE_CONSENT = "consent"
STAGE_REFINED = "refined"

TIMING_ROWS = (
    "transcription",
    "initialStage",
    "userConfirmation",
    "textToSpeech",
    "refinedStage",
    "localProcessing",
    "communication",
)
STUBBED_ROWS = frozenset({"transcription", "textToSpeech"})


# ---------------------------------------------------------------------------
# Events (inbound, timestamped by the shell's clock) and effects (outbound).

@dataclass(frozen=True, slots=True)
class ClientConnected:
    time: float
    conn_id: int


@dataclass(frozen=True, slots=True)
class ClientDisconnected:
    time: float
    conn_id: int


@dataclass(frozen=True, slots=True)
class FrameReceived:
    time: float
    conn_id: int
    frame_type: int
    payload: bytes


@dataclass(frozen=True, slots=True)
class BackendCompleted:
    time: float
    request_id: str
    stage: str
    ok: bool
    raw: str = ""
    error: str = ""
    duration_s: float = 0.0


@dataclass(frozen=True, slots=True)
class TimerFired:
    time: float
    timer_id: str


Event = ClientConnected | ClientDisconnected | FrameReceived | BackendCompleted | TimerFired


@dataclass(frozen=True, slots=True)
class SendFrame:
    conn_id: int
    frame_type: int
    payload: bytes


@dataclass(frozen=True, slots=True)
class CallBackend:
    request_id: str
    stage: str
    prompt: str
    attachment: bytes | None = None


@dataclass(frozen=True, slots=True)
class StartTimer:
    timer_id: str
    delay_s: float


Effect = SendFrame | CallBackend | StartTimer


# ---------------------------------------------------------------------------
# Session state.

@dataclass(slots=True)
class ConnectedUser:
    user_id: str
    display_name: str
    keyword: str
    conn_id: int
    registered: bool = False
    connected: bool = True
    last_seq: int = 0


@dataclass(slots=True)
class SceneObject:
    object_id: int
    prefab_name: str
    pose: Pose  # stored in the reference user's frame
    interactable: bool
    created_by: str
    grabbed_by: str | None = None


@dataclass(slots=True)
class PendingRequest:
    request_id: str
    user_id: str
    req: pipeline.UserRequest
    stage: str = STAGE_INITIAL
    attempts: int = 1
    initial: pipeline.InitialResponse | None = None
    frame: ImageBuffer | None = None
    detections: list[Detection] = field(default_factory=list)
    crop: ImageBuffer | None = None
    t_arrival: float = 0.0
    t_confirm_start: float = 0.0
    t_confirm_done: float = 0.0
    initial_duration: float = 0.0
    refined_duration: float = 0.0
    local_seconds: float = 0.0


@dataclass(frozen=True)
class CoreSettings:
    session_id: str = "default"
    consent_timeout_s: float = 60.0
    keyword_pool: tuple[str, ...] = DEFAULT_KEYWORD_POOL
    prefab_extents: dict = field(default_factory=dict)
    default_extents: tuple[float, float, float] = (0.2, 0.2, 0.2)
    snapshot_on_register: bool = True
    # Wall-clock handler timing leaks nondeterminism into StageTimings;
    # only the real-time shell turns it on.
    measure_local_processing: bool = False
    privacy_policy: PrivacyPolicy = field(default_factory=PrivacyPolicy)


class SessionCore:
    """Single-session authoritative state machine."""

    def __init__(
        self,
        settings: CoreSettings | None = None,
        detector=None,
        mesh: EnvironmentMesh | None = None,
        backend_identity: str = "mock",
        backend_accepts_images: bool = True,
    ):
        self.settings = settings or CoreSettings()
        self.detector = detector
        self.mesh = mesh
        self.backend_identity = backend_identity
        self.backend_accepts_images = backend_accepts_images

        self.users: dict[str, ConnectedUser] = {}
        self._conn_to_user: dict[int, str] = {}
        self.registrations = RegistrationRegistry()
        self.reference_user: str | None = None
        self.scene: dict[int, SceneObject] = {}
        self.ledger = sync.OwnershipLedger()
        self.consent = ConsentRegistry()
        self.pending: dict[str, PendingRequest] = {}
        self.counters: dict[str, int] = {
            "framing_errors": 0,
            "seq_violations": 0,
            "dropped_non_owner": 0,
            "dropped_unknown": 0,
            "dropped_unregistered": 0,
        }
        self.register_handler_seconds: list[float] = []
        self._server_seq = 0
        self._next_object_id = 1
        self._next_user_number = 1
        self._effects: list[Effect] = []

    # -- event entry point -------------------------------------------------

    def on_event(self, ev: Event) -> list[Effect]:
        self._effects = []
        if isinstance(ev, ClientConnected):
            pass  # identity arrives with hello
        elif isinstance(ev, ClientDisconnected):
            self._on_disconnected(ev)
        elif isinstance(ev, FrameReceived):
            self._on_frame(ev)
        elif isinstance(ev, BackendCompleted):
            self._on_backend(ev)
        elif isinstance(ev, TimerFired):
            self._on_timer(ev)
        else:
            raise TypeError(f"unknown event {ev!r}")
        return self._effects

    # -- outbound helpers ---------------------------------------------------

    def _send(self, conn_id: int, msg_type: str, body: dict) -> None:
        self._server_seq += 1
        msg = protocol.ControlMessage(
            type=msg_type,
            session_id=self.settings.session_id,
            sender_id="server",
            seq=self._server_seq,
            body=body,
        )
        self._effects.append(SendFrame(conn_id, protocol.TYPE_CONTROL, msg.encode()))

    def _send_user(self, user: ConnectedUser, msg_type: str, body: dict) -> None:
        if user.connected:
            self._send(user.conn_id, msg_type, body)

    def _notice(self, user: ConnectedUser, code: str, **fields) -> None:
        self._send_user(user, protocol.NOTICE, {"code": code, **fields})

    def _registered_users(self) -> list[ConnectedUser]:
        return [u for u in self.users.values() if u.registered and u.connected]

    # -- connection lifecycle ------------------------------------------------

    def _on_disconnected(self, ev: ClientDisconnected) -> None:
        user_id = self._conn_to_user.pop(ev.conn_id, None)
        if user_id is None:
            return
        user = self.users[user_id]
        user.connected = False
        for obj in self.scene.values():
            if obj.grabbed_by == user_id:
                obj.grabbed_by = None
        # Owned objects become unowned; registration is retained for the session.
        for oid, epoch in self.ledger.release_owner(user_id):
            self._broadcast_ownership(oid, None, epoch)

    def _on_frame(self, ev: FrameReceived) -> None:
        if ev.frame_type == protocol.TYPE_SYNC:
            self._on_sync_batch(ev)
            return
        try:
            msg = protocol.decode_control(ev.payload)
        except FramingError as exc:
            self.counters["framing_errors"] += 1
            logger.warning("conn %d: %s", ev.conn_id, exc)
            return
        if msg.type == protocol.HELLO and ev.conn_id not in self._conn_to_user:
            self._on_hello(ev, msg)
            return
        user = self._user_for_conn(ev.conn_id)
        if user is None:
            self.counters["seq_violations"] += 1
            logger.warning("conn %d: message before hello rejected", ev.conn_id)
            return
        if msg.session_id != self.settings.session_id or msg.sender_id != user.user_id:
            self.counters["seq_violations"] += 1
            self._notice(user, "identity_mismatch")
            return
        if msg.seq <= user.last_seq:
            self.counters["seq_violations"] += 1
            logger.warning(
                "user %s: seq %d not after %d; message rejected",
                user.user_id, msg.seq, user.last_seq,
            )
            self._notice(user, "sequence_violation", got=msg.seq, lastAccepted=user.last_seq)
            return
        user.last_seq = msg.seq

        if msg.type == protocol.REGISTER_REQUEST:
            self._on_register(user, msg, ev)
        elif msg.type == protocol.USER_TEXT:
            self._on_user_text(user, msg, ev)
        elif msg.type == protocol.CONSENT_REPLY:
            self._on_consent_reply(user, msg, ev)
        else:
            self._notice(user, "unexpected_message", messageType=msg.type)

    def _user_for_conn(self, conn_id: int) -> ConnectedUser | None:
        user_id = self._conn_to_user.get(conn_id)
        return self.users.get(user_id) if user_id else None

    def _on_hello(self, ev: FrameReceived, msg: protocol.ControlMessage) -> None:
        body = msg.body
        requested_id = body.get("userId") or f"u{self._next_user_number}"
        user_id = requested_id
        while user_id in self.users:
            self._next_user_number += 1
            user_id = f"u{self._next_user_number}"
        self._next_user_number += 1
        display = body.get("displayName") or user_id
        keyword = self._assign_keyword(body.get("requestedKeyword"))
        user = ConnectedUser(
            user_id=user_id,
            display_name=display,
            keyword=keyword,
            conn_id=ev.conn_id,
            last_seq=msg.seq,
        )
        self.users[user_id] = user
        self._conn_to_user[ev.conn_id] = user_id
        self._send(ev.conn_id, protocol.HELLO, {
            "userId": user_id,
            "sessionId": self.settings.session_id,
            "keyword": keyword,
            "referenceUser": self.reference_user,
        })

    def _assign_keyword(self, requested: str | None) -> str:
        taken = {u.keyword for u in self.users.values()}
        if requested and requested not in taken:
            return requested
        # Requested keyword collided (or none given): server assigns from the pool.
        for kw in self.settings.keyword_pool:
            if kw not in taken:
                return kw
        n = len(taken) + 1
        while f"kw{n}" in taken:
            n += 1
        return f"kw{n}"

    # -- registration ---------------------------------------------------------

    def _on_register(self, user: ConnectedUser, msg: protocol.ControlMessage, ev: FrameReceived) -> None:
        t0 = time.perf_counter()
        obs_doc = msg.body.get("observation")
        observation = None
        if obs_doc is not None:
            try:
                observation = TagObservation(
                    tag_id=int(obs_doc["tagId"]),
                    tag_pose=protocol.pose_from_json(obs_doc["tagPose"]),
                    tag_size_m=float(obs_doc.get("tagSizeMeters", 0.2)),
                    observation_distance_m=float(obs_doc.get("observationDistance", 0.0)),
                    timestamp=float(obs_doc.get("timestamp", ev.time)),
                )
            except (KeyError, TypeError, ValueError):
                observation = None
        try:
            record = self.registrations.register(user.user_id, observation, now=ev.time)
        except RegistrationFailed as exc:
            self._send_user(user, protocol.REGISTER_RESULT, {
                "ok": False,
                "reason": str(exc),
                "retrySuggested": True,
            })
            self.register_handler_seconds.append(time.perf_counter() - t0)
            return
        if self.reference_user is None:
            self.reference_user = user.user_id
        user.registered = True
        self._send_user(user, protocol.REGISTER_RESULT, {
            "ok": True,
            "tagId": record.tag_id,
            "tagPose": protocol.pose_to_json(record.tag_pose),
            "referenceUser": self.reference_user,
        })
        self._push_alignments()
        if self.settings.snapshot_on_register:
            self._send_scene_snapshot(user)
        self.register_handler_seconds.append(time.perf_counter() - t0)

    def _alignment(self, from_user: str, to_user: str) -> AlignmentTransform | None:
        """Rigid mapping between two registered users' frames, if derivable."""
        if from_user == to_user:
            return AlignmentTransform(from_user, to_user, transform=_identity_transform())
        rec_from = self.registrations.get(from_user)
        rec_to = self.registrations.get(to_user)
        if rec_from is None or rec_to is None:
            return None
        try:
            return alignment_transform(rec_from, rec_to)
        except Exception:
            return None

    def _push_alignments(self) -> None:
        """Give every registered user the map other-user -> own-frame transform."""
        registered = [u for u in self.users.values() if u.registered]
        for user in registered:
            table = {}
            for other in registered:
                if other.user_id == user.user_id:
                    continue
                alignment = self._alignment(other.user_id, user.user_id)
                if alignment is not None:
                    table[other.user_id] = protocol.transform_to_json(alignment.transform)
            self._notice(user, "alignments", transforms=table)

    def _send_scene_snapshot(self, user: ConnectedUser) -> None:
        for obj in self.scene.values():
            pose = self._pose_for_recipient(obj.pose, user.user_id)
            if pose is None:
                continue
            self._send_user(user, protocol.RESPONSE_BROADCAST, {
                "kind": "objectCreation",
                "snapshot": True,
                "objectId": obj.object_id,
                "prefabName": obj.prefab_name,
                "pose": protocol.pose_to_json(pose),
                "owner": self.ledger.owner_of(obj.object_id),
                "epoch": self.ledger.epoch_of(obj.object_id),
            })

    def _pose_for_recipient(self, canonical: Pose, recipient: str) -> Pose | None:
        if self.reference_user is None:
            return None
        alignment = self._alignment(self.reference_user, recipient)
        if alignment is None:
            return None
        return transform_pose_between_users(canonical, alignment)

    def _canonical_from_user(self, pose: Pose, owner: str) -> Pose:
        if self.reference_user is None:
            raise BroadcastError("no reference frame yet (nobody registered)")
        alignment = self._alignment(owner, self.reference_user)
        if alignment is None:
            raise BroadcastError(f"user {owner} is not registered")
        return transform_pose_between_users(pose, alignment)

    # -- request pipeline ------------------------------------------------------

    def _on_user_text(self, user: ConnectedUser, msg: protocol.ControlMessage, ev: FrameReceived) -> None:
        body = msg.body
        request_id = body.get("requestId", "")
        if not request_id or request_id in self.pending:
            self._notice(user, "duplicate_request", requestId=request_id)
            return
        frame_ref = body.get("frameId")
        camera = None
        if body.get("camera") is not None:
            doc = body["camera"]
            try:
                camera = CameraModel(
                    pose=protocol.pose_from_json(doc["pose"]),
                    horizontal_fov_deg=float(doc["horizontalFov"]),
                    image_width=int(doc["imageWidth"]),
                    image_height=int(doc["imageHeight"]),
                ).validate()
            except Exception:
                self._notice(user, "request_failed", requestId=request_id, stage="parse",
                             reason="bad camera model")
                return
        detections: list[Detection] = []
        frame: ImageBuffer | None = None
        if frame_ref is not None:
            if self.detector is None:
                self._notice(user, "request_failed", requestId=request_id, stage="detect",
                             reason="no detector configured")
                return
            try:
                detections = self.detector.detect(frame_ref)
                frame = self.detector.frame_pixels(frame_ref)
            except ScenarioError as exc:
                self._notice(user, "request_failed", requestId=request_id, stage="detect",
                             reason=str(exc))
                return
        fov = describe_frame(detections)
        try:
            req = pipeline.UserRequest(
                request_id=request_id,
                user_id=user.user_id,
                text=body.get("text", ""),
                fov=fov,
                frame_ref=frame_ref,
                camera=camera,
                issued_at=ev.time,
            ).validate()
        except ValueError as exc:
            self._notice(user, "request_failed", requestId=request_id, stage="parse",
                         reason=str(exc))
            return
        pend = PendingRequest(
            request_id=request_id,
            user_id=user.user_id,
            req=req,
            frame=frame,
            detections=detections,
            t_arrival=ev.time,
        )
        self.pending[request_id] = pend
        prompt = pipeline.build_initial_prompt(req)
        self._effects.append(CallBackend(request_id, STAGE_INITIAL, prompt))

    def _on_backend(self, ev: BackendCompleted) -> None:
        pend = self.pending.get(ev.request_id)
        if pend is None:
            return  # request was aborted; stale completion
        user = self.users.get(pend.user_id)
        if user is None:
            self.pending.pop(ev.request_id, None)
            return
        if ev.stage == STAGE_INITIAL:
            pend.initial_duration += ev.duration_s
        else:
            pend.refined_duration += ev.duration_s
        if not ev.ok:
            self._abort(pend, user, stage=ev.stage, reason=ev.error or "backend unavailable")
            return
        if ev.stage == STAGE_INITIAL:
            self._continue_initial(pend, user, ev)
        else:
            self._continue_refined(pend, user, ev)

    def _reprompt_or_abort(self, pend: PendingRequest, user: ConnectedUser,
                           stage: str, raw_error: SchemaError) -> None:
        # One automatic re-prompt per stage, violation appended; two attempts total.
        if pend.attempts >= 2:
            self._abort(pend, user, stage=stage, reason=str(raw_error))
            return
        pend.attempts += 1
        if stage == STAGE_INITIAL:
            base = pipeline.build_initial_prompt(pend.req)
        else:
            crop, decision = self._refined_crop_args(pend)
            base, _ = pipeline.build_refined_prompt(
                pend.req, pend.initial, crop, decision, self.backend_accepts_images
            )
        prompt = (
            f"{base}\n\nYour previous reply was rejected: {raw_error}. "
            "Reply again with valid JSON only."
        )
        attachment = None
        if stage == STAGE_REFINED:
            crop, decision = self._refined_crop_args(pend)
            if crop is not None and self.backend_accepts_images:
                attachment = save_image(crop)
        self._effects.append(CallBackend(pend.request_id, stage, prompt, attachment))

    def _continue_initial(self, pend: PendingRequest, user: ConnectedUser, ev: BackendCompleted) -> None:
        try:
            initial = pipeline.parse_initial_response(ev.raw)
        except SchemaError as exc:
            self._reprompt_or_abort(pend, user, STAGE_INITIAL, exc)
            return
        pend.initial = initial
        pend.attempts = 1
        if initial.crop_area is not None and pend.frame is not None:
            try:
                crop = crop_frame(pend.frame, initial.crop_area)
            except CropError as exc:
                self._notice(user, "crop_failed", requestId=pend.request_id, reason=str(exc))
                self._start_refined(pend, user, ev.time, degraded=False)
                return
            pend.crop = crop
            pend.stage = STAGE_CONSENT
            pend.t_confirm_start = ev.time
            labels = self._labels_inside(pend.detections, initial.crop_area)
            self.consent.open_prompt(pend.request_id, [lb for lb, _ in labels])
            self._send_user(user, protocol.CONSENT_PROMPT, {
                "requestId": pend.request_id,
                "image": base64.b64encode(save_image(crop)).decode("ascii"),
                "imageWidth": crop.width,
                "imageHeight": crop.height,
                "cropArea": list(initial.crop_area.as_box()),
                "detections": [
                    {"label": lb, "level": level.value, "bbox": list(bbox)}
                    for (lb, level), bbox in zip(labels, self._bboxes_inside(pend.detections, initial.crop_area))
                ],
                "timeoutSeconds": self.settings.consent_timeout_s,
            })
            self._effects.append(StartTimer(f"consent:{pend.request_id}", self.settings.consent_timeout_s))
            return
        if initial.crop_area is not None and pend.frame is None:
            self._notice(user, "crop_failed", requestId=pend.request_id,
                         reason="crop requested but the request carried no frame")
        self._start_refined(pend, user, ev.time, degraded=False)

    def _labels_inside(self, detections: list[Detection], rect: Rect) -> list[tuple[str, object]]:
        policy = self.settings.privacy_policy
        return [
            (d.label, policy.level_for(d.label))
            for d in detections
            if _overlaps(d.bbox, rect)
        ]

    def _bboxes_inside(self, detections: list[Detection], rect: Rect) -> list[tuple[float, ...]]:
        return [d.bbox for d in detections if _overlaps(d.bbox, rect)]

    def _on_consent_reply(self, user: ConnectedUser, msg: protocol.ControlMessage, ev: FrameReceived) -> None:
        request_id = msg.body.get("requestId", "")
        pend = self.pending.get(request_id)
        if pend is None or pend.stage != STAGE_CONSENT or pend.user_id != user.user_id:
            self._notice(user, "stale_consent", requestId=request_id)
            return
        approved = bool(msg.body.get("approved"))
        self.consent.decide(request_id, approved, now=ev.time)
        pend.t_confirm_done = ev.time
        if not approved:
            self._notice(user, "degraded_context", requestId=request_id,
                         reason="consent rejected; continuing with text only")
        self._start_refined(pend, user, ev.time, degraded=not approved)

    def _on_timer(self, ev: TimerFired) -> None:
        if not ev.timer_id.startswith("consent:"):
            return
        request_id = ev.timer_id.split(":", 1)[1]
        pend = self.pending.get(request_id)
        if pend is None or pend.stage != STAGE_CONSENT or not self.consent.is_pending(request_id):
            return  # already decided; stale timer
        self.consent.decide(request_id, False, now=ev.time)
        pend.t_confirm_done = ev.time
        user = self.users.get(pend.user_id)
        if user is None:
            self.pending.pop(request_id, None)
            return
        self._notice(user, "degraded_context", requestId=request_id,
                     reason="consent timed out; continuing with text only")
        self._start_refined(pend, user, ev.time, degraded=True)

    def _refined_crop_args(self, pend: PendingRequest):
        decision = self.consent.decision_for(pend.request_id)
        if pend.crop is not None and decision is not None and decision.approved:
            return pend.crop, decision
        return None, None

    def _start_refined(self, pend: PendingRequest, user: ConnectedUser, now: float,
                       degraded: bool) -> None:
        crop, decision = self._refined_crop_args(pend)
        try:
            prompt, attachment = pipeline.build_refined_prompt(
                pend.req, pend.initial, crop, decision, self.backend_accepts_images
            )
        except PrivacyViolation as exc:
            # Hard failure by contract; nothing may leave the edge.
            self._abort(pend, user, stage=STAGE_REFINED, reason=str(exc))
            raise
        pend.stage = STAGE_REFINED
        pend.attempts = 1
        self._effects.append(CallBackend(pend.request_id, STAGE_REFINED, prompt, attachment))

    def _continue_refined(self, pend: PendingRequest, user: ConnectedUser, ev: BackendCompleted) -> None:
        try:
            refined = pipeline.parse_refined_response(ev.raw, pend.initial.category)
        except SchemaError as exc:
            self._reprompt_or_abort(pend, user, STAGE_REFINED, exc)
            return
        t_local0 = time.perf_counter() if self.settings.measure_local_processing else 0.0
        try:
            self._execute(pend, user, refined, ev.time)
        except (BroadcastError, NotFound) as exc:
            self._abort(pend, user, stage="execute", reason=str(exc))
            return
        if self.settings.measure_local_processing:
            pend.local_seconds += time.perf_counter() - t_local0
        self._send_timings(pend, user, done_at=ev.time)
        self.pending.pop(pend.request_id, None)

    def _abort(self, pend: PendingRequest, user: ConnectedUser, stage: str, reason: str) -> None:
        """Fail the request without touching scene, ledger, or registrations."""
        self.pending.pop(pend.request_id, None)
        self._notice(user, "request_failed", requestId=pend.request_id, stage=stage,
                     reason=reason)

    # -- execution & broadcast --------------------------------------------------

    def _extents_for(self, prefab: str) -> Vec3:
        ext = self.settings.prefab_extents.get(
            prefab.lower(), self.settings.default_extents
        )
        return Vec3(*ext)

    def _resolve_object_by_name(self, name: str) -> SceneObject:
        matches = [o for o in self.scene.values() if o.prefab_name.lower() == name.lower()]
        if not matches:
            raise NotFound(f"no scene object named {name!r}")
        return max(matches, key=lambda o: o.object_id)

    def _pixel_to_canonical_hit(self, pend: PendingRequest, x: float, y: float):
        if self.mesh is None:
            raise BroadcastError("no environment mesh configured for pixel-space placement")
        camera = pend.req.camera
        if camera is None:
            raise BroadcastError("pixel-space content requires the capture camera")
        owner = pend.user_id
        if self.reference_user is None or not self.users[owner].registered:
            raise BroadcastError("owner must be registered for pixel-space content")
        alignment = self._alignment(owner, self.reference_user)
        cam_ref = CameraModel(
            pose=transform_pose_between_users(camera.pose, alignment),
            horizontal_fov_deg=camera.horizontal_fov_deg,
            image_width=camera.image_width,
            image_height=camera.image_height,
        )
        try:
            ray = unproject((x, y), cam_ref)
        except Exception as exc:
            raise BroadcastError(f"cannot unproject pixel ({x}, {y}): {exc}") from exc
        hit = raycast(ray, self.mesh)
        if hit is None:
            raise BroadcastError(f"pixel ({x}, {y}) ray hit no environment surface")
        return hit

    def _object_creation_pose(self, pend: PendingRequest, resp: pipeline.ObjectCreation) -> Pose:
        from .geometry import correct_pose

        owner = pend.user_id
        space = resp.space
        if space is pipeline.Space.PIXEL:
            hit = self._pixel_to_canonical_hit(pend, resp.position[0], resp.position[1])
            return correct_pose(hit, self._extents_for(resp.prefab_name))
        if space is pipeline.Space.WORLD:
            pose_owner = Pose(position=Vec3(*resp.position))
            return self._canonical_from_user(pose_owner, owner)
        # local space: attach to the parent object
        if not resp.parent_object:
            raise BroadcastError("local-space creation requires a parentObject")
        parent = self._resolve_object_by_name(resp.parent_object)
        offset = Vec3(*resp.position)
        return Pose(
            position=parent.pose.position + parent.pose.rotation.rotate(offset),
            rotation=parent.pose.rotation,
        )

    def _animation_target(self, pend: PendingRequest, resp: pipeline.AnimationCreation,
                          target: SceneObject) -> Pose:
        space = resp.space
        if space is pipeline.Space.PIXEL:
            hit = self._pixel_to_canonical_hit(pend, resp.position[0], resp.position[1])
            extents = self._extents_for(target.prefab_name)
            return Pose(
                position=hit.point + hit.normal * (extents.y / 2.0),
                rotation=target.pose.rotation,
                scale=target.pose.scale,
            )
        if space is pipeline.Space.WORLD:
            canonical = self._canonical_from_user(Pose(position=Vec3(*resp.position)), pend.user_id)
            return Pose(position=canonical.position, rotation=target.pose.rotation,
                        scale=target.pose.scale)
        offset = Vec3(*resp.position)
        return Pose(
            position=target.pose.position + target.pose.rotation.rotate(offset),
            rotation=target.pose.rotation,
            scale=target.pose.scale,
        )

    def _execute(self, pend: PendingRequest, user: ConnectedUser,
                 refined: pipeline.RefinedResponse, now: float) -> None:
        if isinstance(refined, pipeline.ObjectCreation):
            canonical = self._object_creation_pose(pend, refined)  # may raise; no mutation yet
            oid = self._next_object_id
            self._next_object_id += 1
            self.scene[oid] = SceneObject(
                object_id=oid,
                prefab_name=refined.prefab_name,
                pose=canonical,
                interactable=True,
                created_by=pend.user_id,
            )
            self.ledger.add(oid, owner=pend.user_id)
            self._broadcast_content(pend.request_id, {
                "kind": "objectCreation",
                "objectId": oid,
                "prefabName": refined.prefab_name,
                "owner": pend.user_id,
                "epoch": self.ledger.epoch_of(oid),
            }, canonical)
        elif isinstance(refined, pipeline.AnimationCreation):
            target = self._resolve_object_by_name(refined.object_name)
            target_pose = self._animation_target(pend, refined, target)
            target.pose = target_pose
            self._broadcast_content(pend.request_id, {
                "kind": "animationCreation",
                "actionType": refined.action_type,
                "objectId": target.object_id,
                "objectName": target.prefab_name,
            }, target_pose)
        else:
            body = {
                "kind": "answer",
                "requestId": pend.request_id,
                "answerText": refined.answer_text,
            }
            for recipient in self._registered_users():
                self._send_user(recipient, protocol.RESPONSE_BROADCAST, dict(body))
            for other in self.users.values():
                if other.connected and not other.registered:
                    self._notice(other, "unregistered_recipient", requestId=pend.request_id)

    def _broadcast_content(self, request_id: str, body: dict, canonical: Pose) -> None:
        """Exactly one broadcast per registered user, pose in that user's frame."""
        for recipient in self._registered_users():
            pose = self._pose_for_recipient(canonical, recipient.user_id)
            if pose is None:
                self._notice(recipient, "unregistered_recipient", requestId=request_id)
                continue
            payload = dict(body)
            payload["requestId"] = request_id
            payload["pose"] = protocol.pose_to_json(pose)
            self._send_user(recipient, protocol.RESPONSE_BROADCAST, payload)
        for other in self.users.values():
            if other.connected and not other.registered:
                self._notice(other, "unregistered_recipient", requestId=request_id)

    def _send_timings(self, pend: PendingRequest, user: ConnectedUser, done_at: float) -> None:
        confirmation = max(0.0, pend.t_confirm_done - pend.t_confirm_start) \
            if pend.t_confirm_done else 0.0
        total = max(0.0, done_at - pend.t_arrival)
        known = pend.initial_duration + pend.refined_duration + confirmation + pend.local_seconds
        communication = max(0.0, total - known)
        values = {
            "transcription": 0.0,
            "initialStage": pend.initial_duration,
            "userConfirmation": confirmation,
            "textToSpeech": 0.0,
            "refinedStage": pend.refined_duration,
            "localProcessing": pend.local_seconds,
            "communication": communication,
        }
        rows = [
            {"name": name, "seconds": values[name], "stubbed": name in STUBBED_ROWS}
            for name in TIMING_ROWS
        ]
        self._send_user(user, protocol.STAGE_TIMINGS, {
            "requestId": pend.request_id,
            "rows": rows,
            "totalWithoutConfirmation": max(0.0, total - confirmation),
        })

    # -- interaction sync ---------------------------------------------------------

    def _on_sync_batch(self, ev: FrameReceived) -> None:
        user = self._user_for_conn(ev.conn_id)
        if user is None:
            self.counters["dropped_unregistered"] += 1
            return
        try:
            records = sync.decode_batch(ev.payload)
        except FramingError as exc:
            self.counters["framing_errors"] += 1
            logger.warning("user %s: %s", user.user_id, exc)
            return
        if not user.registered:
            self.counters["dropped_unregistered"] += len(records)
            return
        accepted = bytearray()
        ref_alignment = self._alignment(user.user_id, self.reference_user) \
            if self.reference_user else None
        for i, record in enumerate(records):
            if not self._process_sync_record(user, record):
                continue
            accepted += ev.payload[i * sync.RECORD_SIZE : (i + 1) * sync.RECORD_SIZE]
            obj = self.scene.get(record.object_id)
            if obj is not None and ref_alignment is not None:
                obj.pose = transform_pose_between_users(record.pose(), ref_alignment)
            if record.events & sync.EVENT_DESTROYED:
                self.scene.pop(record.object_id, None)
                self.ledger.remove(record.object_id)
        if accepted:
            payload = bytes(accepted)
            for other in self._registered_users():
                if other.user_id != user.user_id:
                    self._effects.append(SendFrame(other.conn_id, protocol.TYPE_SYNC, payload))

    def _process_sync_record(self, user: ConnectedUser, record: sync.SyncRecord) -> bool:
        """Apply claim/release semantics; returns True if the record is forwarded."""
        oid = record.object_id
        obj = self.scene.get(oid)
        if obj is None or oid not in self.ledger:
            self.counters["dropped_unknown"] += 1
            if record.events & sync.EVENT_GRABBED:
                self._notice(user, "claim_not_found", objectId=oid)
            return False
        if record.events & sync.EVENT_GRABBED:
            if obj.grabbed_by not in (None, user.user_id):
                # Arbitration: whoever is currently holding the object wins.
                self.counters["dropped_non_owner"] += 1
                self._notice(user, "ownership_denied", objectId=oid, holder=obj.grabbed_by)
                return False
            result = self.ledger.claim(user.user_id, oid)
            obj.grabbed_by = None if record.events & sync.EVENT_RELEASED else user.user_id
            if result.previous_owner not in (None, user.user_id):
                prev = self.users.get(result.previous_owner)
                if prev is not None:
                    self._notice(prev, "ownership_lost", objectId=oid, epoch=result.epoch,
                                 newOwner=user.user_id)
            self._broadcast_ownership(oid, user.user_id, result.epoch)
        elif record.events & sync.EVENT_RELEASED:
            if obj.grabbed_by == user.user_id:
                obj.grabbed_by = None
        if self.ledger.owner_of(oid) != user.user_id:
            self.counters["dropped_non_owner"] += 1
            return False
        return True

    def _broadcast_ownership(self, object_id: int, owner: str | None, epoch: int) -> None:
        for u in self._registered_users():
            self._notice(u, "ownership", objectId=object_id, owner=owner, epoch=epoch)

    # -- introspection ---------------------------------------------------------

    def snapshot(self) -> dict:
        """Deterministic state digest for atomicity and replay checks."""
        return {
            "scene": {
                oid: {
                    "prefab": obj.prefab_name,
                    "pose": {
                        "position": obj.pose.position.as_tuple(),
                        "rotation": obj.pose.rotation.as_tuple(),
                        "scale": obj.pose.scale.as_tuple(),
                    },
                    "createdBy": obj.created_by,
                    "grabbedBy": obj.grabbed_by,
                }
                for oid, obj in sorted(self.scene.items())
            },
            "ledger": {oid: list(entry) for oid, entry in sorted(self.ledger.snapshot().items())},
            "registrations": {
                uid: {
                    "tagId": rec.tag_id,
                    "position": rec.tag_pose.position.as_tuple(),
                    "rotation": rec.tag_pose.rotation.as_tuple(),
                }
                for uid, rec in sorted(
                    (u, self.registrations.get(u)) for u in self.registrations.users()
                )
            },
            "referenceUser": self.reference_user,
            "counters": dict(self.counters),
        }


def _identity_transform():
    from .geometry import RigidTransform

    return RigidTransform.identity()
