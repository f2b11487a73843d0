/** DOM wiring: left click adds a positive point, right click a negative
 * one; controls map one-to-one onto the session endpoints. */

import { SessionApi } from "./api.js";
import { canvasToImage } from "./coords.js";
import { drawOverlay } from "./render.js";
import { SessionStore } from "./state.js";

const api = new SessionApi("");
const store = new SessionStore(api);

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const statusEl = document.getElementById("status")!;
const iouEl = document.getElementById("iou")!;
const stepEl = document.getElementById("step")!;
const errorEl = document.getElementById("error")!;

let bitmap: ImageBitmap | null = null;

async function loadBitmap(sessionId: string): Promise<void> {
  const resp = await fetch(api.imageUrl(sessionId));
  bitmap = await createImageBitmap(await resp.blob());
}

store.subscribe((state) => {
  const session = state.session;
  if (session) {
    canvas.width = session.width;
    canvas.height = session.height;
    drawOverlay(ctx, state, bitmap);
  }
  statusEl.textContent = state.busy ? "working..." : session ? "ready" : "no session";
  stepEl.textContent = String(state.step);
  iouEl.textContent = state.iou === null ? "n/a" : `${(state.iou * 100).toFixed(1)}%`;
  errorEl.textContent = state.error ?? "";
  for (const button of document.querySelectorAll<HTMLButtonElement>("[data-needs-session]")) {
    button.disabled = !session;
  }
});

async function startGenerated(kind: string): Promise<void> {
  const seed = Math.floor(Math.random() * 1_000_000);
  await store.newGenerated(kind, seed);
  const session = store.state.session;
  if (session) {
    await loadBitmap(session.session_id);
    drawOverlay(ctx, store.state, bitmap);
  }
}

for (const kind of ["disk", "rect", "blob", "ring"]) {
  document.getElementById(`gen-${kind}`)!.addEventListener("click", () => {
    void startGenerated(kind);
  });
}

document.getElementById("upload")!.addEventListener("change", (event) => {
  const input = event.target as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  const reader = new FileReader();
  reader.onload = async () => {
    const url = reader.result as string;
    const base64 = url.slice(url.indexOf(",") + 1);
    await store.newFromImage(base64);
    const session = store.state.session;
    if (session) {
      await loadBitmap(session.session_id);
      drawOverlay(ctx, store.state, bitmap);
    }
  };
  reader.readAsDataURL(file);
});

function clickAt(event: MouseEvent, polarity: "positive" | "negative"): void {
  const session = store.state.session;
  if (!session) return;
  const pos = canvasToImage(event.offsetX, event.offsetY, canvas.clientWidth,
    canvas.clientHeight, session.width, session.height);
  if (pos) void store.placeClick(pos.row, pos.col, polarity);
}

canvas.addEventListener("click", (event) => clickAt(event, "positive"));
canvas.addEventListener("contextmenu", (event) => {
  event.preventDefault();
  clickAt(event, "negative");
});

document.getElementById("undo")!.addEventListener("click", () => void store.undo());
document.getElementById("reset")!.addEventListener("click", () => void store.reset());

(document.getElementById("opacity") as HTMLInputElement).addEventListener("input", (event) => {
  store.setOverlayOpacity(Number((event.target as HTMLInputElement).value) / 100);
});
(document.getElementById("show-region") as HTMLInputElement).addEventListener("change", (event) => {
  store.toggleRegion((event.target as HTMLInputElement).checked);
});
