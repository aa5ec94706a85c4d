// Browser wiring: WebSocket transport + session + 3D view + panels.

import { ClientSession } from "./session";
import { SceneView } from "./view3d";
import { Panels } from "./ui";
import { parseFrameCorpus, CorpusFrame } from "./corpus";
import { ZERO_NOISE } from "./synthetic";

let session: ClientSession | null = null;
let socket: WebSocket | null = null;
let frames = new Map<string, CorpusFrame>();
let requestCounter = 0;

const panels = new Panels(() => session, () => frames);

const view = new SceneView(
  document.getElementById("scene") as HTMLCanvasElement,
  {
    onGrab: (oid) => session?.grab(oid) ?? false,
    onDrag: (oid, pos) => session?.dragTo(oid, pos),
    onRelease: (oid) => session?.release(oid),
  },
);

function byId<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function connect() {
  const address = byId<HTMLInputElement>("server-address").value;
  const name = byId<HTMLInputElement>("display-name").value || "browser";
  socket?.close();
  session = new ClientSession({
    send: (frame) => socket?.send(frame),
    displayName: name,
    userId: name,
  });
  session.markConnecting();
  socket = new WebSocket(address);
  socket.binaryType = "arraybuffer";
  socket.onopen = () => session?.hello();
  socket.onmessage = (event) => session?.feed(new Uint8Array(event.data as ArrayBuffer));
  socket.onerror = () => session?.markTransportError("connection failed");
  socket.onclose = () => {
    if (session && session.state.connection !== "error") {
      session.markTransportError("connection closed");
    }
  };
}

byId<HTMLButtonElement>("btn-connect").onclick = connect;
byId<HTMLButtonElement>("btn-retry").onclick = connect;

byId<HTMLButtonElement>("btn-register").onclick = () => {
  const distance = Number(byId<HTMLInputElement>("register-distance").value) || 1.0;
  const jitter = Number(byId<HTMLInputElement>("register-noise").value) || 0;
  session?.register({
    distanceM: distance,
    noise: jitter > 0
      ? { positionStdM: jitter, rotationStdDeg: jitter * 50, distanceScale: 0.1, seed: Date.now() & 0xffff }
      : ZERO_NOISE,
  });
};

byId<HTMLButtonElement>("btn-send").onclick = () => {
  const text = byId<HTMLInputElement>("request-text").value.trim();
  if (!text || !session) return;
  requestCounter += 1;
  const frame = byId<HTMLSelectElement>("frame-select").value || undefined;
  session.submitRequest(`web-${requestCounter}`, text, frame);
};

fetch("frames.corpus")
  .then((r) => r.text())
  .then((text) => {
    frames = parseFrameCorpus(text);
    panels.populateFrameSelect();
  })
  .catch(() => panels.populateFrameSelect());

function loop() {
  session?.tickLatency();
  panels.refresh();
  if (session) view.sync(session.state, session.state.userId);
  view.renderFrame();
  requestAnimationFrame(loop);
}
requestAnimationFrame(loop);
