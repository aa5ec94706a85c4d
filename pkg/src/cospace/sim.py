"""Deterministic simulation and measurement harness.

A virtual-clock discrete-event loop drives the session core directly:
scripted clients, in-memory links, and scheduled backend completions make
a whole multi-user session a pure function of (scenario, seeds, mock
scripts). Every inbound event and outbound effect lands in a replayable
event log. Real-time measurement lives in :mod:`cospace.realtime`.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import protocol, server, sync
from .colocation import (
    AlignmentTransform,
    NoiseSpec,
    alignment_transform,
    cube_corner_probes,
    spatial_inconsistency,
    synthetic_observation,
)
from .config import ServerConfig, build_core, load_server_config
from .errors import ScenarioError
from .geometry import (
    Pose,
    Quat,
    RigidTransform,
    Vec3,
    apply_to_pose,
    compose,
    invert,
)
from .pipeline import RetryPolicy
from .protocol import dumps_canonical
from .sync import ChangePolicy, ReplicaStore, SyncRecord

TIMING_ROW_KEYS = server.TIMING_ROWS + ("totalWithoutConfirmation",)


class VirtualLoop:
    """Single-threaded discrete-event scheduler with a virtual clock."""

    def __init__(self):
        self.now = 0.0
        self._heap: list[tuple[float, int, object]] = []
        self._counter = 0

    def call_at(self, when: float, fn) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule into the past ({when} < {self.now})")
        self._counter += 1
        heapq.heappush(self._heap, (when, self._counter, fn))

    def call_later(self, delay: float, fn) -> None:
        self.call_at(self.now + delay, fn)

    def run(self, until: float | None = None) -> None:
        while self._heap:
            when, _, fn = self._heap[0]
            if until is not None and when > until:
                self.now = until
                return
            heapq.heappop(self._heap)
            self.now = when
            fn()
        if until is not None:
            self.now = max(self.now, until)


class EventLog:
    """Structured, canonically-serialized run log."""

    def __init__(self):
        self.entries: list[dict] = []

    def add(self, kind: str, **fields) -> None:
        self.entries.append({"kind": kind, **fields})

    def lines(self) -> list[bytes]:
        return [dumps_canonical(e) for e in self.entries]

    def dump(self, path) -> None:
        with open(path, "wb") as fh:
            for line in self.lines():
                fh.write(line + b"\n")

    @staticmethod
    def load(path) -> list[dict]:
        with open(path, "rb") as fh:
            return [json.loads(line) for line in fh if line.strip()]


class SimServer:
    """Virtual-clock shell around the session core."""

    def __init__(self, core: server.SessionCore, backend, loop: VirtualLoop,
                 log: EventLog, retry_policy: RetryPolicy = RetryPolicy(),
                 link_latency_s: float = 0.0):
        self.core = core
        self.backend = backend
        self.loop = loop
        self.log = log
        self.retry_policy = retry_policy
        self.link_latency_s = link_latency_s
        self._next_conn = 1
        self._clients: dict[int, object] = {}
        self.bytes_to_server = {"control": 0, "sync": 0}
        self.bytes_to_clients = {"control": 0, "sync": 0}

    # -- connections -----------------------------------------------------

    def connect(self, client) -> int:
        conn_id = self._next_conn
        self._next_conn += 1
        self._clients[conn_id] = client
        self.log.add("event", t=self.loop.now, event="client_connected", conn=conn_id)
        self._dispatch(server.ClientConnected(time=self.loop.now, conn_id=conn_id))
        return conn_id

    def disconnect(self, conn_id: int) -> None:
        self._clients.pop(conn_id, None)
        self.log.add("event", t=self.loop.now, event="client_disconnected", conn=conn_id)
        self._dispatch(server.ClientDisconnected(time=self.loop.now, conn_id=conn_id))

    def deliver(self, conn_id: int, frame_type: int, payload: bytes) -> None:
        """Client-to-server frame; arrives after the link latency."""
        channel = "control" if frame_type == protocol.TYPE_CONTROL else "sync"
        self.bytes_to_server[channel] += len(payload) + protocol.FRAME_HEADER.size

        def arrive():
            self.log.add(
                "event", t=self.loop.now, event="frame_received",
                conn=conn_id, frameType=frame_type, payloadHex=payload.hex(),
            )
            self._dispatch(server.FrameReceived(
                time=self.loop.now, conn_id=conn_id,
                frame_type=frame_type, payload=payload,
            ))

        self.loop.call_later(self.link_latency_s, arrive)

    # -- event pump --------------------------------------------------------

    def _dispatch(self, ev: server.Event) -> None:
        for effect in self.core.on_event(ev):
            self._apply(effect)

    def _apply(self, effect: server.Effect) -> None:
        if isinstance(effect, server.SendFrame):
            channel = "control" if effect.frame_type == protocol.TYPE_CONTROL else "sync"
            self.bytes_to_clients[channel] += len(effect.payload) + protocol.FRAME_HEADER.size
            self.log.add(
                "effect", t=self.loop.now, effect="send_frame",
                conn=effect.conn_id, frameType=effect.frame_type,
                size=len(effect.payload) + protocol.FRAME_HEADER.size,
                payloadHex=effect.payload.hex(),
            )
            client = self._clients.get(effect.conn_id)
            if client is None:
                return
            ftype, payload = effect.frame_type, effect.payload
            self.loop.call_later(
                self.link_latency_s, lambda: client.on_frame(ftype, payload)
            )
        elif isinstance(effect, server.CallBackend):
            self.log.add(
                "effect", t=self.loop.now, effect="call_backend",
                requestId=effect.request_id, stage=effect.stage,
                promptSha256=hashlib.sha256(effect.prompt.encode()).hexdigest(),
                attachmentBytes=len(effect.attachment) if effect.attachment else 0,
            )
            self._run_backend(effect)
        elif isinstance(effect, server.StartTimer):
            self.log.add(
                "effect", t=self.loop.now, effect="start_timer",
                timerId=effect.timer_id, delayS=effect.delay_s,
            )
            timer_id = effect.timer_id
            self.loop.call_later(effect.delay_s, lambda: self._fire_timer(timer_id))
        else:
            raise TypeError(f"unknown effect {effect!r}")

    def _fire_timer(self, timer_id: str) -> None:
        self.log.add("event", t=self.loop.now, event="timer_fired", timerId=timer_id)
        self._dispatch(server.TimerFired(time=self.loop.now, timer_id=timer_id))

    def _run_backend(self, call: server.CallBackend) -> None:
        started = self.loop.now

        def finish(ok: bool, raw: str, error: str = "") -> None:
            duration = self.loop.now - started
            self.log.add(
                "event", t=self.loop.now, event="backend_completed",
                requestId=call.request_id, stage=call.stage, ok=ok,
                raw=raw, error=error, durationS=duration,
            )
            self._dispatch(server.BackendCompleted(
                time=self.loop.now, request_id=call.request_id, stage=call.stage,
                ok=ok, raw=raw, error=error, duration_s=duration,
            ))

        def attempt(n: int) -> None:
            reply = self.backend.respond(call.prompt, call.attachment)
            if reply.fail:
                if n < self.retry_policy.retries:
                    delay = reply.delay_s + self.retry_policy.backoff_for(n)
                    self.loop.call_later(delay, lambda: attempt(n + 1))
                else:
                    self.loop.call_later(
                        reply.delay_s, lambda: finish(False, "", "transport failure")
                    )
            else:
                self.loop.call_later(reply.delay_s, lambda: finish(True, reply.raw))

        attempt(0)


@dataclass(slots=True)
class TimedMessage:
    t: float
    body: dict


class SimClient:
    """Scripted (or receive-only pseudo) client on the virtual loop.

    ``origin`` places the client's world frame in the shared site frame;
    everything scripted in site coordinates converts through it, matching
    how devices with independent tracking origins would behave.
    """

    def __init__(
        self,
        sim: SimServer,
        client_id: str,
        display_name: str | None = None,
        origin: RigidTransform | None = None,
        policy: ChangePolicy | None = None,
        receive_only: bool = False,
        requested_keyword: str | None = None,
    ):
        self.sim = sim
        self.loop = sim.loop
        self.client_id = client_id
        self.display_name = display_name or client_id
        self.requested_keyword = requested_keyword
        self.origin = origin or RigidTransform.identity()  # user frame -> site
        self.to_user = invert(self.origin)  # site -> user frame
        self.policy = policy or ChangePolicy()
        self.receive_only = receive_only

        self.conn_id: int | None = None
        self.user_id: str | None = None
        self.keyword: str | None = None
        self.registered = False
        self._seq = 0
        self._decoder = protocol.FrameDecoder()

        self.replica = ReplicaStore()
        self.alignments: dict[str, RigidTransform] = {}  # other user -> my frame
        self.owners: dict[int, str | None] = {}
        self.sync_sends: list[tuple[float, bytes]] = []
        self.sync_receives: list[tuple[float, bytes]] = []
        self.broadcasts: list[TimedMessage] = []
        self.notices: list[TimedMessage] = []
        self.prompts: list[TimedMessage] = []
        self.timings: list[TimedMessage] = []
        self.results: list[TimedMessage] = []
        self.outbound: list[tuple[float, int, bytes]] = []  # privacy-audit surface
        self._last_sent: dict[int, tuple[float, Pose]] = {}

    # -- plumbing -----------------------------------------------------------

    def connect(self) -> None:
        self.conn_id = self.sim.connect(self)
        body = {"displayName": self.display_name, "userId": self.client_id}
        if self.requested_keyword:
            body["requestedKeyword"] = self.requested_keyword
        self._send_control(protocol.HELLO, body, session_id="")

    def disconnect(self) -> None:
        if self.conn_id is not None:
            self.sim.disconnect(self.conn_id)
            self.conn_id = None

    def _send_control(self, msg_type: str, body: dict, session_id: str | None = None) -> None:
        if self.receive_only and msg_type not in (protocol.HELLO, protocol.REGISTER_REQUEST):
            raise AssertionError("pseudo user must never send content")
        self._seq += 1
        msg = protocol.ControlMessage(
            type=msg_type,
            session_id=self.sim.core.settings.session_id if session_id is None else session_id,
            sender_id=self.user_id or self.client_id,
            seq=self._seq,
            body=body,
        )
        payload = msg.encode()
        self.outbound.append((self.loop.now, protocol.TYPE_CONTROL, payload))
        self.sim.deliver(self.conn_id, protocol.TYPE_CONTROL, payload)

    def _send_sync(self, records: list[SyncRecord]) -> None:
        payload = sync.encode_batch(records)
        self.outbound.append((self.loop.now, protocol.TYPE_SYNC, payload))
        for i in range(len(records)):
            self.sync_sends.append(
                (self.loop.now, payload[i * sync.RECORD_SIZE : (i + 1) * sync.RECORD_SIZE])
            )
        self.sim.deliver(self.conn_id, protocol.TYPE_SYNC, payload)

    # -- inbound ---------------------------------------------------------------

    def on_frame(self, frame_type: int, payload: bytes) -> None:
        if frame_type == protocol.TYPE_SYNC:
            self._on_sync(payload)
            return
        msg = protocol.decode_control(payload)
        body = msg.body
        now = self.loop.now
        if msg.type == protocol.HELLO:
            self.user_id = body["userId"]
            self.keyword = body["keyword"]
        elif msg.type == protocol.REGISTER_RESULT:
            self.results.append(TimedMessage(now, body))
            if body.get("ok"):
                self.registered = True
        elif msg.type == protocol.NOTICE:
            self.notices.append(TimedMessage(now, body))
            code = body.get("code")
            if code == "alignments":
                self.alignments = {
                    uid: protocol.transform_from_json(doc)
                    for uid, doc in body.get("transforms", {}).items()
                }
            elif code == "ownership":
                self.owners[body["objectId"]] = body.get("owner")
        elif msg.type == protocol.RESPONSE_BROADCAST:
            self.broadcasts.append(TimedMessage(now, body))
            kind = body.get("kind")
            if kind == "objectCreation":
                oid = body["objectId"]
                self.owners[oid] = body.get("owner")
                self.replica.create(
                    oid, body["prefabName"], protocol.pose_from_json(body["pose"]),
                    owner=body.get("owner"),
                    alignment=self._alignment_for_owner(body.get("owner")),
                )
            elif kind == "animationCreation":
                oid = body["objectId"]
                obj = self.replica.objects.get(oid)
                if obj is not None:
                    obj.pose = protocol.pose_from_json(body["pose"])
        elif msg.type == protocol.CONSENT_PROMPT:
            self.prompts.append(TimedMessage(now, body))
        elif msg.type == protocol.STAGE_TIMINGS:
            self.timings.append(TimedMessage(now, body))

    def _alignment_for_owner(self, owner: str | None) -> AlignmentTransform | None:
        if owner is None or owner == self.user_id:
            return None
        transform = self.alignments.get(owner)
        if transform is None:
            return None
        return AlignmentTransform(owner, self.user_id, transform=transform)

    def _on_sync(self, payload: bytes) -> None:
        now = self.loop.now
        for i in range(0, len(payload), sync.RECORD_SIZE):
            chunk = payload[i : i + sync.RECORD_SIZE]
            self.sync_receives.append((now, chunk))
            record = sync.decode_record(chunk)
            owner = self.owners.get(record.object_id)
            self.replica.apply_remote_update(record, self._alignment_for_owner(owner))

    # -- scripted actions ----------------------------------------------------------

    def register(self, site_tag: Pose, *, tag_id: int = 0, distance: float = 1.0,
                 tag_size: float = 0.2, noise: NoiseSpec | None = None,
                 draw: int = 0, fail: bool = False) -> None:
        if fail:
            self._send_control(protocol.REGISTER_REQUEST, {"observation": None})
            return
        tag_in_user = apply_to_pose(self.to_user, site_tag)
        observation = synthetic_observation(
            tag_in_user,
            noise or NoiseSpec(0.0, 0.0, 0.0, seed=0),
            tag_id=tag_id,
            tag_size_m=tag_size,
            observation_distance_m=distance,
            timestamp=self.loop.now,
            draw=draw,
        )
        self._send_control(protocol.REGISTER_REQUEST, {
            "observation": {
                "tagId": observation.tag_id,
                "tagPose": protocol.pose_to_json(observation.tag_pose),
                "tagSizeMeters": observation.tag_size_m,
                "observationDistance": observation.observation_distance_m,
                "timestamp": observation.timestamp,
            }
        })

    def request(self, request_id: str, text: str, frame: str | None = None,
                camera_site: Pose | None = None, fov_deg: float = 60.0,
                width: int = 640, height: int = 480) -> None:
        body: dict = {"requestId": request_id, "text": text}
        if frame is not None:
            cam_pose_user = apply_to_pose(self.to_user, camera_site or _default_camera_pose())
            body["frameId"] = frame
            body["camera"] = {
                "pose": protocol.pose_to_json(cam_pose_user),
                "horizontalFov": fov_deg,
                "imageWidth": width,
                "imageHeight": height,
            }
        self._send_control(protocol.USER_TEXT, body)

    def consent(self, request_id: str, approve: bool) -> None:
        self._send_control(protocol.CONSENT_REPLY, {
            "requestId": request_id,
            "approved": approve,
        })

    def find_object(self, name: str) -> int | None:
        matches = [
            oid for oid, obj in self.replica.objects.items()
            if obj.prefab_name.lower() == name.lower()
        ]
        return max(matches) if matches else None

    def _object_record(self, oid: int, events: int, pose: Pose | None = None) -> SyncRecord:
        current = pose or self.replica.objects[oid].pose
        return SyncRecord.from_pose(oid, current, events)

    def grab(self, name: str) -> bool:
        oid = self.find_object(name)
        if oid is None:
            return False
        self._send_sync([self._object_record(oid, sync.EVENT_GRABBED)])
        return True

    def release(self, name: str) -> bool:
        oid = self.find_object(name)
        if oid is None:
            return False
        self._send_sync([self._object_record(oid, sync.EVENT_RELEASED)])
        return True

    def tap_claim(self, name: str) -> bool:
        oid = self.find_object(name)
        if oid is None:
            return False
        self._send_sync([
            self._object_record(oid, sync.EVENT_GRABBED | sync.EVENT_RELEASED)
        ])
        return True

    def destroy(self, name: str) -> bool:
        oid = self.find_object(name)
        if oid is None:
            return False
        self._send_sync([self._object_record(oid, sync.EVENT_DESTROYED)])
        return True

    def move_object(self, name: str, to_site: Vec3, duration_s: float,
                    rate_hz: float = 120.0) -> None:
        """Drag an owned object along a line, gated by the change policy."""
        oid = self.find_object(name)
        if oid is None:
            return
        obj = self.replica.objects[oid]
        start = obj.pose
        target_user = apply_to_pose(self.to_user, Pose(position=to_site))
        steps = max(1, int(round(duration_s * rate_hz)))
        t0 = self.loop.now
        self._last_sent.setdefault(oid, (-math.inf, start))

        def tick(step: int) -> None:
            alpha = min(1.0, step / steps)
            pos = Vec3(
                start.position.x + (target_user.position.x - start.position.x) * alpha,
                start.position.y + (target_user.position.y - start.position.y) * alpha,
                start.position.z + (target_user.position.z - start.position.z) * alpha,
            )
            pose = Pose(position=pos, rotation=start.rotation, scale=start.scale)
            current = self.replica.objects.get(oid)
            if current is not None:
                current.pose = pose  # owner-side authoritative move
            last_t, last_pose = self._last_sent[oid]
            if sync.should_sync(last_pose, pose, last_t, self.loop.now, self.policy):
                self._send_sync([SyncRecord.from_pose(oid, pose)])
                self._last_sent[oid] = (self.loop.now, pose)
            if step < steps:
                self.loop.call_at(t0 + (step + 1) / rate_hz, lambda: tick(step + 1))
            else:
                # Settle: motion ended between thresholds; flush the final
                # pose one interval later so replicas converge exactly.
                self.loop.call_later(self.policy.min_interval_s, lambda: settle(pose))

        def settle(pose: Pose) -> None:
            last_t, last_pose = self._last_sent[oid]
            if (last_pose.position - pose.position).norm() > 0.0:
                self._send_sync([SyncRecord.from_pose(oid, pose)])
                self._last_sent[oid] = (self.loop.now, pose)

        tick(0)


def _default_camera_pose() -> Pose:
    # Standing viewpoint looking 45 degrees down at the floor near the origin.
    return Pose(
        position=Vec3(0.0, 1.5, 2.0),
        rotation=Quat.from_axis_angle(Vec3(1, 0, 0), -45.0),
    )


def _pose_from_doc(doc: dict | None) -> Pose:
    if not doc:
        return Pose()
    rotation = Quat.identity()
    if "yaw_deg" in doc:
        rotation = Quat.from_axis_angle(Vec3(0, 1, 0), float(doc["yaw_deg"]))
    if "pitch_deg" in doc:
        rotation = (rotation * Quat.from_axis_angle(Vec3(1, 0, 0), float(doc["pitch_deg"]))).normalized()
    if "rotation" in doc:
        rotation = Quat(*doc["rotation"])
    return Pose(position=Vec3(*doc.get("position", (0, 0, 0))), rotation=rotation)


def _origin_from_doc(doc: dict | None) -> RigidTransform:
    pose = _pose_from_doc(doc)
    return RigidTransform(rotation=pose.rotation, translation=pose.position)


# ---------------------------------------------------------------------------
# Scenario execution.

@dataclass(frozen=True, slots=True)
class StatRow:
    mean: float
    std: float
    count: int
    unit: str = "s"


@dataclass
class LatencyReport:
    rows: dict[str, StatRow] = field(default_factory=dict)

    def to_payload(self) -> dict:
        return {
            name: {"mean": r.mean, "std": r.std, "count": r.count, "unit": r.unit}
            for name, r in self.rows.items()
        }


def _stat(samples: list[float]) -> StatRow:
    if not samples:
        return StatRow(0.0, 0.0, 0)
    mean = statistics.fmean(samples)
    std = statistics.pstdev(samples) if len(samples) > 1 else 0.0
    return StatRow(mean, std, len(samples))


@dataclass
class ScenarioResult:
    log: EventLog
    report: LatencyReport
    snapshot: dict
    clients: dict[str, SimClient]
    server: SimServer


def load_scenario(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise ScenarioError("scenario must be a mapping with version: 1")
    if "clients" not in doc or not isinstance(doc["clients"], list):
        raise ScenarioError("scenario needs a clients list")
    for client in doc["clients"]:
        times = [float(a.get("at", 0.0)) for a in client.get("actions", [])]
        if times != sorted(times):
            raise ScenarioError(f"client {client.get('id')}: action timestamps must be nondecreasing")
    return doc


def run_scenario(scenario_path, out_dir=None, seed: int | None = None) -> ScenarioResult:
    """Execute a scenario on the virtual clock; deterministic given seeds."""
    scenario_path = Path(scenario_path)
    doc = load_scenario(scenario_path)
    effective_seed = int(doc.get("seed", 0)) if seed is None else seed

    config = load_server_config(doc.get("server", {}), base_dir=scenario_path.parent)
    core, backend = build_core(config)
    loop = VirtualLoop()
    log = EventLog()
    log.add("meta", scenario=scenario_path.name, seed=effective_seed, version=1)
    sim = SimServer(core, backend, loop, log, retry_policy=config.retry_policy)

    site_tag = _pose_from_doc(doc.get("site_tag"))
    noise = NoiseSpec(
        position_std_m=config.noise.position_std_m,
        rotation_std_deg=config.noise.rotation_std_deg,
        distance_scale=config.noise.distance_scale,
        seed=effective_seed,
    )

    clients: dict[str, SimClient] = {}
    for cdoc in doc["clients"]:
        client = SimClient(
            sim,
            client_id=cdoc["id"],
            display_name=cdoc.get("display_name"),
            origin=_origin_from_doc(cdoc.get("origin")),
            policy=config.change_policy,
        )
        clients[cdoc["id"]] = client
        _schedule_actions(client, cdoc.get("actions", []), site_tag, noise)

    for pdoc in doc.get("pseudo_users", []) or []:
        host = clients[pdoc["host"]]
        pseudo = SimClient(
            sim,
            client_id=pdoc.get("id", f"{pdoc['host']}_shadow"),
            origin=host.origin,
            receive_only=True,
        )
        clients[pseudo.client_id] = pseudo
        at = float(pdoc.get("at", 0.0))
        loop.call_at(at, pseudo.connect)
        # Shares the host's device: registers with the identical (noiseless
        # relative to host) observation so its frame coincides with the host's.
        host_draw = pdoc.get("draw")
        loop.call_at(at + 1e-3, lambda p=pseudo, d=host_draw: p.register(
            site_tag,
            noise=noise if d is not None else None,
            draw=d if d is not None else 0,
        ))

    loop.run(until=float(doc["duration"]) if "duration" in doc else None)

    snapshot = core.snapshot()
    log.add("final", snapshot=_jsonify(snapshot))
    report = build_latency_report(clients, log)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log.dump(out_dir / "events.log")
        with open(out_dir / "latency.json", "wb") as fh:
            fh.write(dumps_canonical(report.to_payload()))
    return ScenarioResult(log=log, report=report, snapshot=snapshot,
                          clients=clients, server=sim)


def _schedule_actions(client: SimClient, actions: list[dict], site_tag: Pose,
                      noise: NoiseSpec) -> None:
    loop = client.loop
    for action in actions:
        at = float(action.get("at", 0.0))
        kind = action.get("do")
        a = dict(action)

        def run(kind=kind, a=a):
            if kind == "connect":
                client.connect()
            elif kind == "disconnect":
                client.disconnect()
            elif kind == "register":
                client.register(
                    site_tag,
                    tag_id=int(a.get("tag", 0)),
                    distance=float(a.get("distance", 1.0)),
                    tag_size=float(a.get("tag_size", 0.2)),
                    noise=None if a.get("zero_noise") else noise,
                    draw=int(a.get("draw", 0)),
                    fail=bool(a.get("fail", False)),
                )
            elif kind == "request":
                client.request(
                    request_id=a["id"],
                    text=a["text"],
                    frame=a.get("frame"),
                    camera_site=_pose_from_doc(a.get("camera")) if a.get("camera") else None,
                    fov_deg=float(a.get("fov", 60.0)),
                    width=int(a.get("width", 640)),
                    height=int(a.get("height", 480)),
                )
            elif kind == "consent":
                client.consent(a["request"], bool(a.get("approve", True)))
            elif kind == "grab":
                client.grab(a["object"])
            elif kind == "release":
                client.release(a["object"])
            elif kind == "claim":
                client.tap_claim(a["object"])
            elif kind == "destroy":
                client.destroy(a["object"])
            elif kind == "move":
                client.move_object(
                    a["object"],
                    Vec3(*a["to"]),
                    duration_s=float(a.get("duration", 1.0)),
                    rate_hz=float(a.get("rate", 120.0)),
                )
            else:
                raise ScenarioError(f"unknown action {kind!r}")

        loop.call_at(at, run)


def _jsonify(value):
    if isinstance(value, dict):
        return {str(k): _jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonify(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# Measurements.

def interaction_sync_samples(owner: SimClient, pseudo: SimClient) -> list[float]:
    """One-hop latency per forwarded record, on the shared host clock."""
    sent_at: dict[bytes, float] = {}
    for t, chunk in owner.sync_sends:
        sent_at.setdefault(chunk, t)
    samples = []
    for t, chunk in pseudo.sync_receives:
        t0 = sent_at.get(chunk)
        if t0 is not None:
            samples.append(t - t0)
    return samples


def response_sync_samples(log: EventLog, clients: dict[str, SimClient]) -> list[float]:
    """Broadcast-issued to broadcast-received deltas across all recipients."""
    issued: dict[str, float] = {}
    for entry in log.entries:
        if entry.get("effect") == "send_frame" and entry.get("frameType") == protocol.TYPE_CONTROL:
            payload = bytes.fromhex(entry["payloadHex"])
            try:
                msg = protocol.decode_control(payload)
            except Exception:
                continue
            if msg.type == protocol.RESPONSE_BROADCAST:
                rid = msg.body.get("requestId", "")
                issued.setdefault(rid, entry["t"])
    samples = []
    for client in clients.values():
        for timed in client.broadcasts:
            rid = timed.body.get("requestId", "")
            if rid in issued:
                samples.append(timed.t - issued[rid])
    return samples


def build_latency_report(clients: dict[str, SimClient], log: EventLog) -> LatencyReport:
    rows: dict[str, list[float]] = {key: [] for key in TIMING_ROW_KEYS}
    for client in clients.values():
        for timed in client.timings:
            for row in timed.body.get("rows", []):
                rows.setdefault(row["name"], []).append(row["seconds"])
            rows["totalWithoutConfirmation"].append(
                timed.body.get("totalWithoutConfirmation", 0.0)
            )
    report = LatencyReport()
    for name in TIMING_ROW_KEYS:
        report.rows[name] = _stat(rows.get(name, []))
    report.rows["responseSync"] = _stat(response_sync_samples(log, clients))
    pseudo_samples: list[float] = []
    pseudos = [c for c in clients.values() if c.receive_only]
    for pseudo in pseudos:
        for owner in clients.values():
            if owner is pseudo or owner.receive_only:
                continue
            pseudo_samples.extend(interaction_sync_samples(owner, pseudo))
    report.rows["interactionSync"] = _stat(pseudo_samples)
    return report


def bandwidth_account(entries: list[dict]) -> dict:
    """Exact byte accounting recomputed from the event log."""
    times = [e["t"] for e in entries if "t" in e]
    duration = max(times) - min(times) if len(times) >= 2 else 0.0
    to_clients = {"control": 0, "sync": 0}
    to_server = {"control": 0, "sync": 0}
    records_per_object: dict[int, int] = {}
    for e in entries:
        channel = None
        if e.get("frameType") == protocol.TYPE_CONTROL:
            channel = "control"
        elif e.get("frameType") == protocol.TYPE_SYNC:
            channel = "sync"
        if channel is None:
            continue
        payload = bytes.fromhex(e["payloadHex"])
        size = len(payload) + protocol.FRAME_HEADER.size
        if e.get("effect") == "send_frame":
            to_clients[channel] += size
            if channel == "sync":
                for record in sync.decode_batch(payload):
                    records_per_object[record.object_id] = (
                        records_per_object.get(record.object_id, 0) + 1
                    )
        elif e.get("event") == "frame_received":
            to_server[channel] += size
    return {
        "durationS": duration,
        "bytesToClients": to_clients,
        "bytesToServer": to_server,
        "bytesPerSecondToClients": {
            k: (v / duration if duration > 0 else 0.0) for k, v in to_clients.items()
        },
        "recordsForwardedPerObject": records_per_object,
        "recordsPerSecondPerObject": {
            oid: (n / duration if duration > 0 else 0.0)
            for oid, n in records_per_object.items()
        },
    }


# ---------------------------------------------------------------------------
# Registration sweep.

def registration_sweep(
    distances: list[float],
    tag_sizes: list[float],
    noise: NoiseSpec,
    trials_per: int,
    seed: int = 0,
) -> list[tuple[float, float, float]]:
    """Mean spatial inconsistency per (distance, tag size) cell.

    Trials share random draws across cells (common random numbers), so the
    effect of the distance/size scaling is isolated from sampling noise.
    """
    if trials_per < 1:
        raise ValueError("trials_per must be >= 1")
    import numpy as np

    rows = []
    site_tag = Pose()
    probes = cube_corner_probes()
    for distance in distances:
        for tag_size in tag_sizes:
            total = 0.0
            for trial in range(trials_per):
                rng = np.random.default_rng([seed & 0x7FFFFFFF, trial])
                records = {}
                truth = {}
                for k, uid in enumerate(("a", "b")):
                    origin = RigidTransform(
                        rotation=Quat.from_axis_angle(
                            Vec3(0, 1, 0), float(rng.uniform(-180, 180))
                        ),
                        translation=Vec3(*rng.uniform(-2, 2, size=3)),
                    )
                    truth[uid] = origin
                    tag_in_user = apply_to_pose(invert(origin), site_tag)
                    obs = synthetic_observation(
                        tag_in_user,
                        noise,
                        tag_id=0,
                        tag_size_m=tag_size,
                        observation_distance_m=distance,
                        draw=trial * 2 + k,
                    )
                    from .colocation import RegistrationRecord

                    records[uid] = RegistrationRecord(
                        user_id=uid, tag_id=0, tag_pose=obs.tag_pose, registered_at=0.0
                    )
                estimated = alignment_transform(records["a"], records["b"])
                true_align = AlignmentTransform(
                    "a", "b",
                    transform=compose(invert(truth["b"]), truth["a"]),
                )
                total += spatial_inconsistency(estimated, true_align, probes)
            rows.append((distance, tag_size, total / trials_per))
    return rows


# ---------------------------------------------------------------------------
# Replay.

def replay_log(entries: list[dict], config: ServerConfig) -> tuple[dict, dict]:
    """Re-execute logged inbound events; returns (replayed, logged) snapshots."""
    core, _backend = build_core(config)
    logged_final: dict | None = None
    for entry in entries:
        kind = entry.get("kind")
        if kind == "final":
            logged_final = entry["snapshot"]
            continue
        if kind != "event":
            continue
        name = entry["event"]
        t = entry["t"]
        if name == "client_connected":
            core.on_event(server.ClientConnected(time=t, conn_id=entry["conn"]))
        elif name == "client_disconnected":
            core.on_event(server.ClientDisconnected(time=t, conn_id=entry["conn"]))
        elif name == "frame_received":
            core.on_event(server.FrameReceived(
                time=t, conn_id=entry["conn"], frame_type=entry["frameType"],
                payload=bytes.fromhex(entry["payloadHex"]),
            ))
        elif name == "backend_completed":
            core.on_event(server.BackendCompleted(
                time=t, request_id=entry["requestId"], stage=entry["stage"],
                ok=entry["ok"], raw=entry.get("raw", ""), error=entry.get("error", ""),
                duration_s=entry.get("durationS", 0.0),
            ))
        elif name == "timer_fired":
            core.on_event(server.TimerFired(time=t, timer_id=entry["timerId"]))
    if logged_final is None:
        raise ScenarioError("log has no final snapshot entry")
    return _jsonify(core.snapshot()), logged_final
