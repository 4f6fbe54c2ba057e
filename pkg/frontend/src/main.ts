// Console entry point: prompt box, live 30 FPS stick-figure playback,
// segment history with first-frame latency, and dynamic recomposition.

import { SessionClient, fetchSkeleton, resolveServer } from "./client.js";
import type { SkeletonDef } from "./protocol.js";
import { Camera, defaultCamera, drawGround, drawSkeleton } from "./render.js";
import { ConsoleState } from "./state.js";

const FPS = 30;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function main(): void {
  const canvas = el<HTMLCanvasElement>("view");
  const ctx = canvas.getContext("2d")!;
  const statusEl = el<HTMLSpanElement>("status");
  const bufferEl = el<HTMLSpanElement>("buffer");
  const historyEl = el<HTMLUListElement>("history");
  const promptInput = el<HTMLInputElement>("prompt");
  const sendBtn = el<HTMLButtonElement>("send");
  const reconnectBtn = el<HTMLButtonElement>("reconnect");
  const recomposeBtn = el<HTMLButtonElement>("recompose");
  const anchorSelect = el<HTMLSelectElement>("anchor");
  const errorEl = el<HTMLDivElement>("error");

  const { ws, http } = resolveServer(window.location.search, window.location.origin);
  const state = new ConsoleState();
  const camera: Camera = defaultCamera();
  let skeleton: SkeletonDef | null = null;

  fetchSkeleton(http)
    .then((sk) => (skeleton = sk))
    .catch((e) => showError(`cannot load skeleton: ${e.message}`));

  function showError(message: string): void {
    errorEl.textContent = message;
    errorEl.style.display = "block";
    window.setTimeout(() => (errorEl.style.display = "none"), 4000);
  }

  const client = new SessionClient(ws, {
    onStatus: (s) => {
      state.status = s;
      statusEl.textContent = s;
      statusEl.className = `status ${s}`;
      reconnectBtn.style.display = s === "closed" ? "inline-block" : "none";
    },
    onMessage: (msg) => {
      state.apply(msg, performance.now());
      if (msg.type === "error") showError(msg.message);
      if (msg.type === "segment_start" || msg.type === "segment_end") renderHistory();
    },
    onProtocolError: () => showError("malformed frame from server (ignored)"),
  });
  client.connect();

  function renderHistory(): void {
    historyEl.replaceChildren(
      ...state.segments.map((seg) => {
        const li = document.createElement("li");
        const range =
          seg.endFrame === null
            ? `${seg.startFrame}..streaming`
            : `${seg.startFrame}..${seg.endFrame}`;
        const lat =
          seg.firstFrameLatencyMs === null ? "" : ` — first frame ${seg.firstFrameLatencyMs.toFixed(0)} ms`;
        li.textContent = `[${seg.segment}] "${seg.text}" (${range})${seg.reason ? ` ${seg.reason}` : ""}${lat}`;
        return li;
      }),
      ...state.branches.map((br, i) => {
        const li = document.createElement("li");
        li.className = "branch";
        li.textContent = `branch ${i}: ${br.segments.map((s) => `"${s.text}"`).join(", ")} (${br.frames.length} frames from ${br.fromFrame})`;
        return li;
      })
    );
    anchorSelect.replaceChildren(
      ...state.recomposeAnchors().map((seg, i) => {
        const opt = document.createElement("option");
        opt.value = String(i + 1); // server keeps segments [0, value)
        opt.textContent = `after segment ${seg.segment} ("${seg.text}")`;
        return opt;
      })
    );
    anchorSelect.selectedIndex = anchorSelect.options.length - 1;
  }

  function submitPrompt(): void {
    const text = promptInput.value.trim();
    if (!text) return;
    state.notePromptSent(performance.now());
    if (!client.send({ type: "prompt", text })) {
      showError("not connected");
      return;
    }
    promptInput.value = "";
  }
  sendBtn.onclick = submitPrompt;
  promptInput.onkeydown = (ev) => {
    if (ev.key === "Enter") submitPrompt();
  };

  recomposeBtn.onclick = () => {
    const keep = Number(anchorSelect.value);
    const text = promptInput.value.trim();
    if (!text) {
      showError("type the replacement prompt first");
      return;
    }
    if (!Number.isInteger(keep) || keep < 1) {
      showError("no completed segment to recompose from");
      return;
    }
    state.notePromptSent(performance.now());
    client.send({ type: "recompose", segment: keep, text });
    promptInput.value = "";
  };

  reconnectBtn.onclick = () => {
    state.status = "connecting";
    client.connect();
  };

  // camera orbit via mouse drag, zoom via wheel
  let dragging = false;
  let lastXY = [0, 0];
  canvas.onmousedown = (ev) => {
    dragging = true;
    lastXY = [ev.clientX, ev.clientY];
  };
  window.onmouseup = () => (dragging = false);
  window.onmousemove = (ev) => {
    if (!dragging) return;
    camera.yaw -= (ev.clientX - lastXY[0]) * 0.01;
    camera.pitch = Math.min(1.4, Math.max(-0.2, camera.pitch + (ev.clientY - lastXY[1]) * 0.01));
    lastXY = [ev.clientX, ev.clientY];
  };
  canvas.onwheel = (ev) => {
    ev.preventDefault();
    camera.distance = Math.min(12, Math.max(1, camera.distance * (1 + ev.deltaY * 0.001)));
  };

  // 30 FPS playback: frames buffer faster than real time, playback is paced
  let acc = 0;
  let last = performance.now();
  function tick(now: number): void {
    acc += now - last;
    last = now;
    const frameInterval = 1000 / FPS;
    let frame = state.currentFrame();
    while (acc >= frameInterval) {
      acc -= frameInterval;
      const next = state.advancePlayhead();
      if (next) frame = next;
    }
    ctx.fillStyle = "#10141c";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    if (frame && skeleton) {
      const root = frame.joints[0];
      // follow the character on the ground plane
      camera.target = [root[0], 0.9, root[2]];
      drawGround(ctx, camera, canvas.width, canvas.height);
      drawSkeleton(ctx, frame.joints, skeleton, camera, canvas.width, canvas.height);
    } else {
      drawGround(ctx, camera, canvas.width, canvas.height);
    }
    bufferEl.textContent = `${state.framesAhead} frames generated ahead of playback`;
    requestAnimationFrame(tick);
  }
  requestAnimationFrame(tick);
}

window.addEventListener("DOMContentLoaded", main);
