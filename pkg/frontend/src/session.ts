// Client session state machine. Transport-agnostic: frames come in via
// feed(), frames go out via the injected send(). Every outbound frame is
// also appended to outboundLog so tests (and the audit) can inspect
// exactly what left this client. The view layer renders snapshots of
// `state`; all mutations happen here, driven by server messages or local
// interaction, which keeps the UI a pure function of session state.

import {
  Pose,
  RigidTransform,
  Vec3,
  applyToPose,
  defaultPose,
  qFromAxisAngle,
  v3,
} from "./math";
import {
  ChangePolicy,
  DEFAULT_POLICY,
  EVENT_DESTROYED,
  EVENT_GRABBED,
  EVENT_RELEASED,
  SyncRecord,
  decodeBatch,
  encodeBatch,
  recordFromPose,
  shouldSync,
} from "./records";
import {
  ControlMessage,
  FrameDecoder,
  TYPE_CONTROL,
  TYPE_SYNC,
  decodeControl,
  encodeControl,
  encodeFrame,
  poseFromJson,
  poseToJson,
  transformFromJson,
} from "./protocol";
import { NoiseSpec, ZERO_NOISE, perturbTagPose } from "./synthetic";

export type ConnectionStatus = "idle" | "connecting" | "connected" | "error";

export type SceneObjectMirror = {
  objectId: number;
  prefabName: string;
  pose: Pose; // in this user's frame
  owner: string | null;
  grabbedLocally: boolean;
  // One-shot display tween for animation broadcasts (sync records snap).
  animateFrom?: Pose;
  animateStart?: number;
};

export type ConsentPromptView = {
  requestId: string;
  imageBase64: string;
  imageWidth: number;
  imageHeight: number;
  cropArea: number[]; // left, top, right, bottom in source-frame pixels
  detections: Array<{ label: string; level: string; bbox: number[] }>;
  timeoutSeconds: number;
  receivedAt: number;
};

export type NoticeView = { at: number; body: Record<string, unknown> };

export type RequestProgress = {
  requestId: string;
  text: string;
  sentAt: number;
  stage: string; // submitted | awaiting_consent | done | failed
  outcome?: string;
  timings?: Array<{ name: string; seconds: number; stubbed: boolean }>;
};

export type OutboundFrame = { at: number; frameType: number; payload: Uint8Array };

export type SessionState = {
  connection: ConnectionStatus;
  errorText: string | null;
  userId: string | null;
  keyword: string | null;
  sessionId: string;
  registered: boolean;
  tagPose: Pose | null; // draw the wireframe cube here after registering
  objects: Map<number, SceneObjectMirror>;
  alignments: Map<string, RigidTransform>; // other user -> my frame
  prompts: ConsentPromptView[];
  notices: NoticeView[];
  requests: Map<string, RequestProgress>;
  lastSyncAgeMs: number | null; // latency ticker: age of the newest record
  revision: number; // bumped on every mutation; cheap dirty flag for the view
};

export type SessionOptions = {
  send: (frame: Uint8Array) => void;
  now?: () => number; // seconds, monotonic-ish
  policy?: ChangePolicy;
  displayName: string;
  userId?: string;
  requestedKeyword?: string;
};

export class ClientSession {
  readonly state: SessionState = {
    connection: "idle",
    errorText: null,
    userId: null,
    keyword: null,
    sessionId: "",
    registered: false,
    tagPose: null,
    objects: new Map(),
    alignments: new Map(),
    prompts: [],
    notices: [],
    requests: new Map(),
    lastSyncAgeMs: null,
    revision: 0,
  };
  readonly outboundLog: OutboundFrame[] = [];

  private readonly sendRaw: (frame: Uint8Array) => void;
  private readonly now: () => number;
  private readonly policy: ChangePolicy;
  private readonly displayName: string;
  private readonly desiredUserId?: string;
  private readonly requestedKeyword?: string;
  private readonly decoder = new FrameDecoder();
  private seq = 0;
  private lastSentByObject = new Map<number, { t: number; pose: Pose }>();
  private lastSyncAt: number | null = null;

  constructor(opts: SessionOptions) {
    this.sendRaw = opts.send;
    this.now = opts.now ?? (() => performance.now() / 1000);
    this.policy = opts.policy ?? DEFAULT_POLICY;
    this.displayName = opts.displayName;
    this.desiredUserId = opts.userId;
    this.requestedKeyword = opts.requestedKeyword;
  }

  private bump() {
    this.state.revision += 1;
  }

  private sendFrame(frameType: number, payload: Uint8Array) {
    const frame = encodeFrame(frameType, payload);
    this.outboundLog.push({ at: this.now(), frameType, payload });
    this.sendRaw(frame);
  }

  private sendControl(type: string, body: Record<string, unknown>, sessionId?: string) {
    this.seq += 1;
    const msg: ControlMessage = {
      type,
      sessionId: sessionId ?? this.state.sessionId,
      senderId: this.state.userId ?? this.desiredUserId ?? this.displayName,
      seq: this.seq,
      body,
    };
    this.sendFrame(TYPE_CONTROL, encodeControl(msg));
  }

  // -- lifecycle ---------------------------------------------------------

  markConnecting() {
    this.state.connection = "connecting";
    this.state.errorText = null;
    this.bump();
  }

  markTransportError(text: string) {
    this.state.connection = "error";
    this.state.errorText = text;
    this.bump();
  }

  hello() {
    const body: Record<string, unknown> = { displayName: this.displayName };
    if (this.desiredUserId) body.userId = this.desiredUserId;
    if (this.requestedKeyword) body.requestedKeyword = this.requestedKeyword;
    this.sendControl("hello", body, "");
  }

  // -- inbound -----------------------------------------------------------

  feed(data: Uint8Array) {
    for (const [frameType, payload] of this.decoder.feed(data)) {
      if (frameType === TYPE_SYNC) this.onSync(payload);
      else this.onControl(decodeControl(payload));
    }
  }

  private onControl(msg: ControlMessage) {
    const body = msg.body as any;
    switch (msg.type) {
      case "hello":
        this.state.connection = "connected";
        this.state.userId = body.userId;
        this.state.keyword = body.keyword;
        this.state.sessionId = body.sessionId;
        break;
      case "register_result":
        if (body.ok) {
          this.state.registered = true;
          this.state.tagPose = poseFromJson(body.tagPose);
        } else {
          this.state.notices.push({
            at: this.now(),
            body: { code: "registration_failed", reason: body.reason, retry: true },
          });
        }
        break;
      case "notice":
        this.onNotice(body);
        break;
      case "response_broadcast":
        this.onBroadcast(body);
        break;
      case "consent_prompt":
        this.state.prompts.push({
          requestId: body.requestId,
          imageBase64: body.image,
          imageWidth: body.imageWidth,
          imageHeight: body.imageHeight,
          cropArea: body.cropArea ?? [],
          detections: body.detections ?? [],
          timeoutSeconds: body.timeoutSeconds ?? 60,
          receivedAt: this.now(),
        });
        const pending = this.state.requests.get(body.requestId);
        if (pending) pending.stage = "awaiting_consent";
        break;
      case "stage_timings": {
        const req = this.state.requests.get(body.requestId);
        if (req) {
          req.timings = body.rows;
          req.stage = "done";
        }
        break;
      }
      default:
        break;
    }
    this.bump();
  }

  private onNotice(body: any) {
    this.state.notices.push({ at: this.now(), body });
    const code = body.code;
    if (code === "alignments") {
      this.state.alignments = new Map(
        Object.entries(body.transforms ?? {}).map(([uid, doc]) => [uid, transformFromJson(doc)]),
      );
    } else if (code === "ownership") {
      const obj = this.state.objects.get(body.objectId);
      if (obj) {
        obj.owner = body.owner ?? null;
        if (obj.owner !== this.state.userId) obj.grabbedLocally = false;
      }
    } else if (code === "ownership_lost" || code === "ownership_denied") {
      const obj = this.state.objects.get(body.objectId);
      if (obj) obj.grabbedLocally = false;
    } else if (code === "request_failed") {
      const req = this.state.requests.get(body.requestId);
      if (req) {
        req.stage = "failed";
        req.outcome = body.reason;
      }
    }
  }

  private onBroadcast(body: any) {
    if (body.kind === "objectCreation") {
      this.state.objects.set(body.objectId, {
        objectId: body.objectId,
        prefabName: body.prefabName,
        pose: poseFromJson(body.pose),
        owner: body.owner ?? null,
        grabbedLocally: false,
      });
    } else if (body.kind === "animationCreation") {
      const obj = this.state.objects.get(body.objectId);
      if (obj) {
        obj.animateFrom = obj.pose;
        obj.animateStart = this.now();
        obj.pose = poseFromJson(body.pose);
      }
    }
    const req = body.requestId ? this.state.requests.get(body.requestId) : undefined;
    if (req && !body.snapshot) {
      req.stage = "done";
      req.outcome =
        body.kind === "answer" ? String(body.answerText) : `${body.kind}: ${body.prefabName ?? body.objectName ?? ""}`;
    }
  }

  private onSync(payload: Uint8Array) {
    const now = this.now();
    for (const record of decodeBatch(payload)) {
      const obj = this.state.objects.get(record.objectId);
      if (obj === undefined) continue; // creations arrive as broadcasts first
      const owner = obj.owner;
      if (owner !== null && owner === this.state.userId) continue; // we are authoritative
      let pose: Pose = { position: record.position, rotation: record.rotation, scale: record.scale };
      const alignment = owner ? this.state.alignments.get(owner) : undefined;
      if (alignment) pose = applyToPose(alignment, pose);
      obj.pose = pose;
      obj.animateFrom = undefined; // live sync snaps; no display smoothing
      if (record.events & EVENT_DESTROYED) this.state.objects.delete(record.objectId);
    }
    this.lastSyncAt = now;
    this.state.lastSyncAgeMs = 0;
    this.bump();
  }

  tickLatency() {
    if (this.lastSyncAt !== null) {
      this.state.lastSyncAgeMs = (this.now() - this.lastSyncAt) * 1000;
      this.bump();
    }
  }

  // -- user actions ------------------------------------------------------

  register(opts: { tagPose?: Pose; distanceM?: number; noise?: NoiseSpec; fail?: boolean } = {}) {
    if (opts.fail) {
      this.sendControl("register_request", { observation: null });
      return;
    }
    const truePose: Pose = opts.tagPose ?? {
      position: v3(0, 1, -1),
      rotation: qFromAxisAngle(v3(0, 1, 0), 0),
      scale: v3(1, 1, 1),
    };
    const distance = opts.distanceM ?? 1.0;
    const tagSize = 0.2;
    const observed = perturbTagPose(truePose, opts.noise ?? ZERO_NOISE, distance, tagSize);
    this.sendControl("register_request", {
      observation: {
        tagId: 0,
        tagPose: poseToJson(observed),
        tagSizeMeters: tagSize,
        observationDistance: distance,
        timestamp: this.now(),
      },
    });
  }

  submitRequest(requestId: string, text: string, frameId?: string) {
    const body: Record<string, unknown> = { requestId, text };
    if (frameId) {
      body.frameId = frameId;
      body.camera = {
        pose: poseToJson({
          position: v3(0, 1.5, 2),
          rotation: qFromAxisAngle(v3(1, 0, 0), -45),
          scale: v3(1, 1, 1),
        }),
        horizontalFov: 60,
        imageWidth: 640,
        imageHeight: 480,
      };
    }
    this.state.requests.set(requestId, {
      requestId,
      text,
      sentAt: this.now(),
      stage: "submitted",
    });
    this.sendControl("user_text", body);
    this.bump();
  }

  replyConsent(requestId: string, approved: boolean) {
    this.state.prompts = this.state.prompts.filter((p) => p.requestId !== requestId);
    this.sendControl("consent_reply", { requestId, approved });
    this.bump();
  }

  expireConsentPrompts() {
    const now = this.now();
    const expired = this.state.prompts.filter(
      (p) => now - p.receivedAt >= p.timeoutSeconds,
    );
    for (const prompt of expired) {
      // Closing without action is a rejection; the server also enforces this.
      this.replyConsent(prompt.requestId, false);
    }
  }

  grab(objectId: number): boolean {
    const obj = this.state.objects.get(objectId);
    if (!obj) return false;
    this.sendSyncRecords([recordFromPose(objectId, obj.pose, EVENT_GRABBED)]);
    obj.grabbedLocally = true;
    obj.owner = this.state.userId;
    this.lastSentByObject.set(objectId, { t: this.now(), pose: obj.pose });
    this.bump();
    return true;
  }

  release(objectId: number) {
    const obj = this.state.objects.get(objectId);
    if (!obj) return;
    this.sendSyncRecords([recordFromPose(objectId, obj.pose, EVENT_RELEASED)]);
    obj.grabbedLocally = false;
    this.bump();
  }

  // Drag update while owning: applies locally, streams under the policy.
  dragTo(objectId: number, position: Vec3) {
    const obj = this.state.objects.get(objectId);
    if (!obj || !obj.grabbedLocally) return;
    obj.pose = { position, rotation: obj.pose.rotation, scale: obj.pose.scale };
    const last = this.lastSentByObject.get(objectId) ?? { t: -Infinity, pose: defaultPose() };
    const now = this.now();
    if (shouldSync(last.pose, obj.pose, last.t, now, this.policy)) {
      this.sendSyncRecords([recordFromPose(objectId, obj.pose)]);
      this.lastSentByObject.set(objectId, { t: now, pose: obj.pose });
    }
    this.bump();
  }

  private sendSyncRecords(records: SyncRecord[]) {
    this.sendFrame(TYPE_SYNC, encodeBatch(records));
  }
}
