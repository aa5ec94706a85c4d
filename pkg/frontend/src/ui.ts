// DOM panels: connect form, registration, request form with scenario
// frame selection, the consent dialog, notice feed, and stage progress.

import { ClientSession, ConsentPromptView, SessionState } from "./session";
import { CorpusFrame } from "./corpus";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export class Panels {
  private lastRevision = -1;
  private renderedPrompt: string | null = null;
  private promptDeadline: number | null = null;

  constructor(
    private session: () => ClientSession | null,
    private frames: () => Map<string, CorpusFrame>,
  ) {}

  populateFrameSelect() {
    const select = el<HTMLSelectElement>("frame-select");
    select.innerHTML = "<option value=''>(no frame)</option>";
    for (const frame of this.frames().values()) {
      const option = document.createElement("option");
      option.value = frame.frameId;
      option.textContent = `${frame.frameId} (${frame.detections.map((d) => d.label).join(", ")})`;
      select.appendChild(option);
    }
  }

  refresh() {
    const session = this.session();
    if (!session) return;
    const state = session.state;
    if (state.revision === this.lastRevision) {
      this.tickCountdown();
      return;
    }
    this.lastRevision = state.revision;

    el("status").textContent =
      state.connection === "connected"
        ? `connected as ${state.userId} - keyword "${state.keyword}"` +
          (state.registered ? " - registered" : " - not registered")
        : state.connection + (state.errorText ? `: ${state.errorText}` : "");
    el("status").className = `status ${state.connection}`;
    el<HTMLButtonElement>("btn-retry").style.display =
      state.connection === "error" ? "inline-block" : "none";

    this.renderRequests(state);
    this.renderNotices(state);
    this.renderConsent(state);
    el("latency-ticker").textContent =
      state.lastSyncAgeMs === null
        ? "sync: idle"
        : `sync: last record ${state.lastSyncAgeMs.toFixed(0)} ms ago`;
  }

  private renderRequests(state: SessionState) {
    const list = el("requests");
    list.innerHTML = "";
    for (const req of [...state.requests.values()].reverse()) {
      const item = document.createElement("li");
      const stages = (req.timings ?? [])
        .filter((row) => !row.stubbed && row.seconds > 0)
        .map((row) => `${row.name} ${(row.seconds * 1000).toFixed(0)}ms`)
        .join(" | ");
      item.textContent = `[${req.stage}] ${req.requestId}: ${req.text}` +
        (req.outcome ? ` -> ${req.outcome}` : "") + (stages ? ` (${stages})` : "");
      list.appendChild(item);
    }
  }

  private renderNotices(state: SessionState) {
    const list = el("notices");
    list.innerHTML = "";
    for (const notice of state.notices.slice(-12).reverse()) {
      const item = document.createElement("li");
      const body = notice.body as any;
      if (body.code === "alignments") continue;
      item.textContent = `${body.code ?? "notice"}: ${body.reason ?? body.message ?? JSON.stringify(body)}`;
      list.appendChild(item);
    }
  }

  private renderConsent(state: SessionState) {
    const dialog = el("consent");
    const prompt = state.prompts[0];
    if (!prompt) {
      dialog.style.display = "none";
      this.renderedPrompt = null;
      this.promptDeadline = null;
      return;
    }
    dialog.style.display = "block";
    if (this.renderedPrompt === prompt.requestId) return;
    this.renderedPrompt = prompt.requestId;
    this.promptDeadline = Date.now() + prompt.timeoutSeconds * 1000;
    el("consent-title").textContent =
      `Upload this cropped view for request ${prompt.requestId}?`;
    this.drawCrop(prompt);
    const labels = el("consent-labels");
    labels.innerHTML = "";
    for (const det of prompt.detections) {
      const chip = document.createElement("span");
      chip.className = `chip ${det.level}`;
      chip.textContent = `${det.label} (${det.level})`;
      labels.appendChild(chip);
    }
    el<HTMLButtonElement>("consent-approve").onclick = () =>
      this.session()?.replyConsent(prompt.requestId, true);
    el<HTMLButtonElement>("consent-reject").onclick = () =>
      this.session()?.replyConsent(prompt.requestId, false);
  }

  private tickCountdown() {
    if (this.promptDeadline !== null) {
      const left = Math.max(0, (this.promptDeadline - Date.now()) / 1000);
      el("consent-countdown").textContent = `auto-reject in ${left.toFixed(0)} s`;
    }
    this.session()?.expireConsentPrompts();
  }

  // Decode the portable image container (CIMG header + raw rows) onto the
  // dialog canvas and overlay detection boxes.
  private drawCrop(prompt: ConsentPromptView) {
    const canvas = el<HTMLCanvasElement>("consent-canvas");
    const raw = Uint8Array.from(atob(prompt.imageBase64), (c) => c.charCodeAt(0));
    const view = new DataView(raw.buffer);
    const magicOk =
      String.fromCharCode(raw[0], raw[1], raw[2], raw[3]) === "CIMG" &&
      view.getUint16(4, true) === 1;
    if (!magicOk) return;
    const width = view.getUint32(6, true);
    const height = view.getUint32(10, true);
    const channels = view.getUint16(14, true);
    const pixels = raw.subarray(16);
    canvas.width = width;
    canvas.height = height;
    const ctx = canvas.getContext("2d")!;
    const image = ctx.createImageData(width, height);
    for (let i = 0; i < width * height; i++) {
      const src = i * channels;
      image.data[i * 4] = pixels[src];
      image.data[i * 4 + 1] = pixels[src + (channels > 1 ? 1 : 0)];
      image.data[i * 4 + 2] = pixels[src + (channels > 2 ? 2 : 0)];
      image.data[i * 4 + 3] = 255;
    }
    ctx.putImageData(image, 0, 0);
    // Detection boxes arrive in source-frame pixels; shift by crop origin.
    const [cropLeft, cropTop] = prompt.cropArea;
    for (const det of prompt.detections) {
      const [l, t, r, b] = det.bbox;
      ctx.strokeStyle = det.level === "highlySensitive" ? "#ff4455" :
        det.level === "maybeSensitive" ? "#ffcc44" : "#55ff88";
      ctx.lineWidth = 2;
      ctx.strokeRect(l - cropLeft, t - cropTop, r - l, b - t);
    }
  }
}
