/** Canvas drawing: mask overlay with contour, click markers, intention box. */

import type { Region } from "./api.js";
import type { UiClick, UiState } from "./state.js";

const MASK_COLOR: [number, number, number] = [66, 133, 244];
const POSITIVE_COLOR = "#e53935"; // red markers for foreground clicks
const NEGATIVE_COLOR = "#43a047"; // green markers for background clicks
const REGION_COLOR = "#00b0f0";   // blue intention box

export function maskToImageData(
  mask: Uint8Array,
  width: number,
  height: number,
  opacity: number,
): ImageData {
  const data = new Uint8ClampedArray(width * height * 4);
  const alpha = Math.round(opacity * 255);
  for (let i = 0; i < mask.length; i++) {
    if (!mask[i]) continue;
    const o = i * 4;
    data[o] = MASK_COLOR[0];
    data[o + 1] = MASK_COLOR[1];
    data[o + 2] = MASK_COLOR[2];
    data[o + 3] = alpha;
  }
  // contour: boundary pixels fully opaque
  for (let r = 0; r < height; r++) {
    for (let c = 0; c < width; c++) {
      const i = r * width + c;
      if (!mask[i]) continue;
      const edge =
        r === 0 || r === height - 1 || c === 0 || c === width - 1 ||
        !mask[i - 1] || !mask[i + 1] || !mask[i - width] || !mask[i + width];
      if (edge) data[i * 4 + 3] = 255;
    }
  }
  return new ImageData(data, width, height);
}

export function drawOverlay(
  ctx: CanvasRenderingContext2D,
  state: UiState,
  image: CanvasImageSource | null,
): void {
  const session = state.session;
  if (!session) return;
  const { width, height } = session;
  ctx.clearRect(0, 0, width, height);
  if (image) ctx.drawImage(image, 0, 0, width, height);
  if (state.mask && state.overlayOpacity > 0) {
    const overlay = maskToImageData(state.mask, width, height, state.overlayOpacity);
    const scratch = new OffscreenCanvas(width, height);
    const sctx = scratch.getContext("2d")!;
    sctx.putImageData(overlay, 0, 0);
    ctx.drawImage(scratch, 0, 0);
  }
  if (state.showRegion && state.region) drawRegion(ctx, state.region);
  for (const click of state.clicks) drawMarker(ctx, click, false);
  if (state.pending) drawMarker(ctx, state.pending, true);
}

function drawRegion(ctx: CanvasRenderingContext2D, region: Region): void {
  ctx.save();
  ctx.strokeStyle = REGION_COLOR;
  ctx.lineWidth = 2;
  ctx.setLineDash([6, 4]);
  ctx.strokeRect(region.left, region.top, region.width, region.height);
  ctx.restore();
}

function drawMarker(ctx: CanvasRenderingContext2D, click: UiClick, pending: boolean): void {
  ctx.save();
  ctx.beginPath();
  ctx.arc(click.col + 0.5, click.row + 0.5, 4, 0, 2 * Math.PI);
  ctx.fillStyle = click.polarity === "positive" ? POSITIVE_COLOR : NEGATIVE_COLOR;
  ctx.globalAlpha = pending ? 0.5 : 1.0;
  ctx.fill();
  ctx.lineWidth = 1.5;
  ctx.strokeStyle = "#ffffff";
  ctx.stroke();
  ctx.restore();
}
