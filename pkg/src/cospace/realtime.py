"""Real-time clients over loopback sockets, for wall-clock measurement.

Timing contract: a pseudo user shares its host's process and therefore
its monotonic clock, so one-hop interaction latency is sampled without
any cross-host clock agreement. Virtual-clock runs (:mod:`cospace.sim`)
stay the default; this path exists for latency measurement and live use.
"""

from __future__ import annotations

import math
import socket
import threading
import time
from pathlib import Path

from . import protocol, sync
from .colocation import NoiseSpec, synthetic_observation
from .config import build_core, load_server_config
from .errors import ScenarioError
from .geometry import Pose, RigidTransform, Vec3, apply_to_pose, invert
from .sim import (
    LatencyReport,
    TimedMessage,
    _default_camera_pose,
    _origin_from_doc,
    _pose_from_doc,
    _stat,
    load_scenario,
)
from .sync import ChangePolicy, SyncRecord
from .transport import ServerThread


class SocketClient:
    """Blocking-socket client with a reader thread; mirrors SimClient's surface."""

    def __init__(self, host: str, port: int, client_id: str,
                 origin: RigidTransform | None = None,
                 policy: ChangePolicy | None = None,
                 receive_only: bool = False):
        self.client_id = client_id
        self.origin = origin or RigidTransform.identity()
        self.to_user = invert(self.origin)
        self.policy = policy or ChangePolicy()
        self.receive_only = receive_only

        self.user_id: str | None = None
        self.keyword: str | None = None
        self.registered = threading.Event()
        self.session_id = ""
        self._seq = 0
        self._lock = threading.Lock()

        self.sync_sends: list[tuple[float, bytes]] = []
        self.sync_receives: list[tuple[float, bytes]] = []
        self.broadcasts: list[TimedMessage] = []
        self.notices: list[TimedMessage] = []
        self.prompts: list[TimedMessage] = []
        self.timings: list[TimedMessage] = []
        self.objects: dict[int, dict] = {}
        self._hello_done = threading.Event()

        self._sock = socket.create_connection((host, port), timeout=10)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    # -- inbound -----------------------------------------------------------

    def _read_loop(self) -> None:
        decoder = protocol.FrameDecoder()
        try:
            while True:
                data = self._sock.recv(65536)
                if not data:
                    return
                now = time.monotonic()
                for ftype, payload in decoder.feed(data):
                    self._on_frame(now, ftype, payload)
        except OSError:
            return

    def _on_frame(self, now: float, ftype: int, payload: bytes) -> None:
        if ftype == protocol.TYPE_SYNC:
            for i in range(0, len(payload), sync.RECORD_SIZE):
                self.sync_receives.append((now, payload[i : i + sync.RECORD_SIZE]))
            return
        msg = protocol.decode_control(payload)
        body = msg.body
        if msg.type == protocol.HELLO:
            self.user_id = body["userId"]
            self.keyword = body["keyword"]
            self.session_id = body["sessionId"]
            self._hello_done.set()
        elif msg.type == protocol.REGISTER_RESULT:
            if body.get("ok"):
                self.registered.set()
        elif msg.type == protocol.NOTICE:
            self.notices.append(TimedMessage(now, body))
        elif msg.type == protocol.RESPONSE_BROADCAST:
            self.broadcasts.append(TimedMessage(now, body))
            if body.get("kind") == "objectCreation":
                self.objects[body["objectId"]] = {
                    "prefab": body["prefabName"],
                    "pose": protocol.pose_from_json(body["pose"]),
                }
        elif msg.type == protocol.CONSENT_PROMPT:
            self.prompts.append(TimedMessage(now, body))
        elif msg.type == protocol.STAGE_TIMINGS:
            self.timings.append(TimedMessage(now, body))

    # -- outbound -------------------------------------------------------------

    def _send_frame(self, ftype: int, payload: bytes) -> None:
        with self._lock:
            self._sock.sendall(protocol.encode_frame(ftype, payload))

    def _send_control(self, msg_type: str, body: dict, session_id: str | None = None) -> None:
        if self.receive_only and msg_type not in (protocol.HELLO, protocol.REGISTER_REQUEST):
            raise AssertionError("pseudo user must never send content")
        self._seq += 1
        msg = protocol.ControlMessage(
            type=msg_type,
            session_id=self.session_id if session_id is None else session_id,
            sender_id=self.user_id or self.client_id,
            seq=self._seq,
            body=body,
        )
        self._send_frame(protocol.TYPE_CONTROL, msg.encode())

    def hello(self, timeout: float = 5.0) -> None:
        self._send_control(protocol.HELLO, {
            "displayName": self.client_id, "userId": self.client_id,
        }, session_id="")
        if not self._hello_done.wait(timeout):
            raise TimeoutError("no hello reply")

    def register(self, site_tag: Pose = Pose(), noise: NoiseSpec | None = None,
                 distance: float = 1.0, tag_size: float = 0.2, draw: int = 0,
                 timeout: float = 5.0) -> None:
        tag_in_user = apply_to_pose(self.to_user, site_tag)
        obs = synthetic_observation(
            tag_in_user, noise or NoiseSpec(0.0, 0.0, 0.0, 0),
            tag_id=0, tag_size_m=tag_size, observation_distance_m=distance,
            timestamp=time.monotonic(), draw=draw,
        )
        self._send_control(protocol.REGISTER_REQUEST, {
            "observation": {
                "tagId": obs.tag_id,
                "tagPose": protocol.pose_to_json(obs.tag_pose),
                "tagSizeMeters": obs.tag_size_m,
                "observationDistance": obs.observation_distance_m,
                "timestamp": obs.timestamp,
            }
        })
        if not self.registered.wait(timeout):
            raise TimeoutError("registration did not complete")

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
        self._send_control(protocol.CONSENT_REPLY,
                           {"requestId": request_id, "approved": approve})

    def find_object(self, name: str) -> int | None:
        matches = [oid for oid, o in self.objects.items()
                   if o["prefab"].lower() == name.lower()]
        return max(matches) if matches else None

    def wait_for_object(self, name: str, timeout: float = 10.0) -> int:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            oid = self.find_object(name)
            if oid is not None:
                return oid
            time.sleep(0.005)
        raise TimeoutError(f"object {name!r} never appeared")

    def send_record(self, record: SyncRecord) -> float:
        payload = sync.encode_batch([record])
        t = time.monotonic()
        self.sync_sends.append((t, payload))
        self._send_frame(protocol.TYPE_SYNC, payload)
        return t

    def grab(self, oid: int, pose: Pose) -> None:
        self.send_record(SyncRecord.from_pose(oid, pose, sync.EVENT_GRABBED))

    def release(self, oid: int, pose: Pose) -> None:
        self.send_record(SyncRecord.from_pose(oid, pose, sync.EVENT_RELEASED))

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


INTERACTION_RULES = [
    {
        "match": "measurement cube.*Classify the request",
        "response": {"category": "objectCreation", "CropArea": "None"},
    },
    {
        "match": "classified as object creation.*measurement cube",
        "response": {"prefabName": "cube", "space": "world",
                     "position": [0.0, 0.5, 0.0], "parentObject": None},
    },
]


def measure_interaction_sync(duration_s: float = 3.0, rate_hz: float = 60.0,
                             speed_mps: float = 0.5) -> list[float]:
    """One-hop sync latency over loopback, sampled by a co-hosted pseudo user.

    Runs a live server, creates an interactable through the mock pipeline,
    then streams a scripted drag at the sync rate while the pseudo user
    (sharing this process's clock) timestamps each forwarded record.
    """
    from .pipeline import MockBackend
    from .server import CoreSettings, SessionCore

    core = SessionCore(CoreSettings(session_id="rt", measure_local_processing=True))
    backend = MockBackend.from_config(INTERACTION_RULES)
    thread = ServerThread(core, backend, port=0).start()
    owner = pseudo = observer = None
    try:
        owner = SocketClient("127.0.0.1", thread.port, "owner")
        pseudo = SocketClient("127.0.0.1", thread.port, "pseudo", receive_only=True)
        observer = SocketClient("127.0.0.1", thread.port, "observer")
        for c in (owner, pseudo, observer):
            c.hello()
            c.register()
        owner.request("m1", "place the measurement cube")
        oid = owner.wait_for_object("cube")
        pose = owner.objects[oid]["pose"]
        owner.grab(oid, pose)

        interval = 1.0 / rate_hz
        steps = int(duration_s * rate_hz)
        next_at = time.monotonic()
        for i in range(1, steps + 1):
            next_at += interval
            pose = Pose(
                position=Vec3(pose.position.x + speed_mps * interval,
                              pose.position.y, pose.position.z),
                rotation=pose.rotation,
                scale=pose.scale,
            )
            owner.send_record(SyncRecord.from_pose(oid, pose))
            lag = next_at - time.monotonic()
            if lag > 0:
                time.sleep(lag)
        time.sleep(0.3)  # allow the tail to arrive

        sent_at: dict[bytes, float] = {}
        for t, payload in owner.sync_sends:
            for j in range(0, len(payload), sync.RECORD_SIZE):
                sent_at.setdefault(payload[j : j + sync.RECORD_SIZE], t)
        samples = []
        for t, chunk in pseudo.sync_receives:
            t0 = sent_at.get(chunk)
            if t0 is not None:
                samples.append(t - t0)
        return samples
    finally:
        for c in (owner, pseudo, observer):
            if c is not None:
                c.close()
        thread.stop()


def run_scenario_realtime(scenario_path, out_dir=None) -> dict:
    """Execute a scenario file against a live loopback server, wall clock.

    Determinism is not guaranteed here; use the virtual clock for that.
    Returns the latency report payload assembled from client logs.
    """
    scenario_path = Path(scenario_path)
    doc = load_scenario(scenario_path)
    config = load_server_config(doc.get("server", {}), base_dir=scenario_path.parent)
    core, backend = build_core(config, measure_local_processing=True)
    thread = ServerThread(core, backend, port=0).start()
    site_tag = _pose_from_doc(doc.get("site_tag"))
    noise = config.noise
    clients: dict[str, SocketClient] = {}
    threads: list[threading.Thread] = []
    t0 = time.monotonic()
    try:
        for cdoc in doc["clients"]:
            client = SocketClient(
                "127.0.0.1", thread.port, cdoc["id"],
                origin=_origin_from_doc(cdoc.get("origin")),
                policy=config.change_policy,
            )
            clients[cdoc["id"]] = client
            worker = threading.Thread(
                target=_drive_actions,
                args=(client, cdoc.get("actions", []), site_tag, noise, t0),
                daemon=True,
            )
            threads.append(worker)
        for pdoc in doc.get("pseudo_users", []) or []:
            host = clients[pdoc["host"]]
            pseudo = SocketClient(
                "127.0.0.1", thread.port, pdoc.get("id", f"{pdoc['host']}_shadow"),
                origin=host.origin, receive_only=True,
            )
            clients[pseudo.client_id] = pseudo
            pseudo.hello()
            pseudo.register(site_tag, draw=int(pdoc.get("draw", 0)))
        for worker in threads:
            worker.start()
        for worker in threads:
            worker.join()
        time.sleep(0.5)
        report = _realtime_report(clients)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            thread.server.log.dump(out_dir / "events.log")
            with open(out_dir / "latency.json", "wb") as fh:
                fh.write(protocol.dumps_canonical(report.to_payload()))
        return report.to_payload()
    finally:
        for client in clients.values():
            client.close()
        thread.stop()


def _drive_actions(client: SocketClient, actions: list[dict], site_tag: Pose,
                   noise: NoiseSpec, t0: float) -> None:
    for action in actions:
        at = float(action.get("at", 0.0))
        lag = t0 + at - time.monotonic()
        if lag > 0:
            time.sleep(lag)
        kind = action.get("do")
        try:
            if kind == "connect":
                client.hello()
            elif kind == "disconnect":
                client.close()
            elif kind == "register":
                client.register(
                    site_tag,
                    noise=None if action.get("zero_noise") else noise,
                    distance=float(action.get("distance", 1.0)),
                    tag_size=float(action.get("tag_size", 0.2)),
                    draw=int(action.get("draw", 0)),
                )
            elif kind == "request":
                client.request(
                    action["id"], action["text"], frame=action.get("frame"),
                    camera_site=_pose_from_doc(action.get("camera")) if action.get("camera") else None,
                    fov_deg=float(action.get("fov", 60.0)),
                )
            elif kind == "consent":
                client.consent(action["request"], bool(action.get("approve", True)))
            elif kind in ("grab", "release", "claim", "destroy"):
                oid = client.wait_for_object(action["object"])
                pose = client.objects[oid]["pose"]
                bits = {
                    "grab": sync.EVENT_GRABBED,
                    "release": sync.EVENT_RELEASED,
                    "claim": sync.EVENT_GRABBED | sync.EVENT_RELEASED,
                    "destroy": sync.EVENT_DESTROYED,
                }[kind]
                client.send_record(SyncRecord.from_pose(oid, pose, bits))
            elif kind == "move":
                _drive_move(client, action)
            else:
                raise ScenarioError(f"unknown action {kind!r}")
        except (TimeoutError, OSError):
            return


def _drive_move(client: SocketClient, action: dict) -> None:
    oid = client.wait_for_object(action["object"])
    start = client.objects[oid]["pose"]
    target = apply_to_pose(client.to_user, Pose(position=Vec3(*action["to"])))
    duration = float(action.get("duration", 1.0))
    rate = float(action.get("rate", 60.0))
    steps = max(1, int(duration * rate))
    last_sent = (-math.inf, start)
    begin = time.monotonic()
    for step in range(1, steps + 1):
        alpha = step / steps
        pose = Pose(
            position=Vec3(
                start.position.x + (target.position.x - start.position.x) * alpha,
                start.position.y + (target.position.y - start.position.y) * alpha,
                start.position.z + (target.position.z - start.position.z) * alpha,
            ),
            rotation=start.rotation,
            scale=start.scale,
        )
        client.objects[oid]["pose"] = pose
        now = time.monotonic()
        if sync.should_sync(last_sent[1], pose, last_sent[0], now, client.policy):
            client.send_record(SyncRecord.from_pose(oid, pose))
            last_sent = (now, pose)
        lag = begin + step / rate - time.monotonic()
        if lag > 0:
            time.sleep(lag)


def _realtime_report(clients: dict[str, SocketClient]) -> LatencyReport:
    from .server import TIMING_ROWS

    report = LatencyReport()
    rows: dict[str, list[float]] = {name: [] for name in TIMING_ROWS}
    rows["totalWithoutConfirmation"] = []
    for client in clients.values():
        for timed in client.timings:
            for row in timed.body.get("rows", []):
                rows.setdefault(row["name"], []).append(row["seconds"])
            rows["totalWithoutConfirmation"].append(
                timed.body.get("totalWithoutConfirmation", 0.0))
    for name, samples in rows.items():
        report.rows[name] = _stat(samples)
    pseudo_samples: list[float] = []
    pseudos = [c for c in clients.values() if c.receive_only]
    for pseudo in pseudos:
        sent_at: dict[bytes, float] = {}
        for owner in clients.values():
            if owner.receive_only:
                continue
            for t, payload in owner.sync_sends:
                for j in range(0, len(payload), sync.RECORD_SIZE):
                    sent_at.setdefault(payload[j : j + sync.RECORD_SIZE], t)
        for t, chunk in pseudo.sync_receives:
            t0 = sent_at.get(chunk)
            if t0 is not None:
                pseudo_samples.append(t - t0)
    report.rows["interactionSync"] = _stat(pseudo_samples)
    return report
