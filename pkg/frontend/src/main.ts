/**
 * Browser wiring: connects the review loop, overlay geometry, progress
 * view, and miss-marking mode to the DOM.  All logic lives in the
 * imported modules; this file only moves data between them and the page.
 */

import { ReviewApi } from "./api.js";
import { FnMarkingMode } from "./fnMode.js";
import {
  type ViewTransform,
  boxToDisplay,
  dragToBox,
  fitView,
} from "./overlay.js";
import { toProgressView } from "./progress.js";
import { ReviewLoop } from "./reviewLoop.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

const api = new ReviewApi(window.location.origin);

const canvas = byId<HTMLCanvasElement>("frame-canvas");
const ctx = canvas.getContext("2d")!;
const counterEl = byId<HTMLSpanElement>("counter");
const precisionEl = byId<HTMLSpanElement>("precision");
const barEl = byId<HTMLDivElement>("progress-bar");
const statusEl = byId<HTMLSpanElement>("status");
const detectorInput = byId<HTMLInputElement>("detector-id");
const startButton = byId<HTMLButtonElement>("start-session");
const fnButton = byId<HTMLButtonElement>("toggle-fn-mode");
const submitFnButton = byId<HTMLButtonElement>("submit-fn-marks");

let loop: ReviewLoop | null = null;
let fnMode: FnMarkingMode | null = null;
let view: ViewTransform = { zoom: 1, pan: { x: 0, y: 0 } };
let frameImage: HTMLImageElement | null = null;
let dragStart: { x: number; y: number } | null = null;

function render(): void {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (frameImage) {
    const d = boxToDisplay(
      [0, 0, frameImage.naturalWidth, frameImage.naturalHeight],
      view,
    );
    ctx.drawImage(frameImage, d.left, d.top, d.width, d.height);
  }
  const item = loop?.current;
  if (item && !fnMode) {
    const d = boxToDisplay(item.bbox, view);
    ctx.strokeStyle = "#ffd000";
    ctx.lineWidth = 2;
    ctx.strokeRect(d.left, d.top, d.width, d.height);
  }
  if (fnMode) {
    ctx.strokeStyle = "#ff4040";
    ctx.lineWidth = 2;
    for (const box of fnMode.pending) {
      const d = boxToDisplay([box.x, box.y, box.w, box.h], view);
      ctx.strokeRect(d.left, d.top, d.width, d.height);
    }
  }
}

function renderProgress(): void {
  if (!loop?.progress) return;
  const p = toProgressView(loop.progress);
  counterEl.textContent = p.counterText;
  precisionEl.textContent = p.precisionText;
  barEl.style.width = `${(p.fractionDone * 100).toFixed(1)}%`;
  const offline =
    loop.pendingRetries > 0 ? ` — offline, ${loop.pendingRetries} queued` : "";
  statusEl.textContent = `${loop.state}${offline}`;
}

async function showCurrentFrame(): Promise<void> {
  const item = loop?.current;
  if (!item) {
    frameImage = null;
    render();
    return;
  }
  const img = new Image();
  img.src = api.frameImageUrl(item.frame_id);
  await img.decode().catch(() => undefined);
  frameImage = img;
  const width = item.frame_width ?? img.naturalWidth;
  const height = item.frame_height ?? img.naturalHeight;
  view = fitView(
    { width, height },
    { width: canvas.width, height: canvas.height },
  );
  render();
}

startButton.addEventListener("click", async () => {
  const opened = await api.openSession({
    detector_id: detectorInput.value || "weak",
  });
  loop = new ReviewLoop(api, opened.session_id);
  await loop.start();
  await showCurrentFrame();
  renderProgress();
});

fnButton.addEventListener("click", () => {
  const item = loop?.current;
  if (!loop || !item) return;
  if (fnMode) {
    fnMode = null;
  } else {
    fnMode = new FnMarkingMode(api, loop.sessionId, item.frame_id, {
      width: item.frame_width ?? canvas.width,
      height: item.frame_height ?? canvas.height,
    });
  }
  render();
});

submitFnButton.addEventListener("click", async () => {
  if (!fnMode) return;
  await fnMode.submit().catch((err) => {
    statusEl.textContent = String(err);
  });
  render();
});

window.addEventListener("keydown", async (event) => {
  if (!loop || fnMode) return;
  if (event.target instanceof HTMLInputElement) return;
  await loop.handleKey(event.key);
  if (loop.pendingRetries > 0) void loop.flushRetries();
  await showCurrentFrame();
  renderProgress();
});

canvas.addEventListener("mousedown", (event) => {
  if (!fnMode) return;
  dragStart = { x: event.offsetX, y: event.offsetY };
});

canvas.addEventListener("mousemove", (event) => {
  if (!fnMode || !dragStart) return;
  render();
  const box = dragToBox(
    dragStart,
    { x: event.offsetX, y: event.offsetY },
    view,
    fnMode.frame,
  );
  if (box) {
    const d = boxToDisplay([box.x, box.y, box.w, box.h], view);
    ctx.strokeStyle = "#ff8080";
    ctx.strokeRect(d.left, d.top, d.width, d.height);
  }
});

canvas.addEventListener("mouseup", (event) => {
  if (!fnMode || !dragStart) return;
  fnMode.addDrag(dragStart, { x: event.offsetX, y: event.offsetY }, view);
  dragStart = null;
  render();
});
