/**
 * Canvas <-> image-pixel mapping.  The canvas backing store is sized
 * exactly to the image, so only the CSS scale factor needs undoing; a
 * click rendered at a canvas point must address the same pixel the server
 * sees (checked round-trip in tests).
 */

export interface PixelPos {
  row: number;
  col: number;
}

export function canvasToImage(
  offsetX: number,
  offsetY: number,
  clientWidth: number,
  clientHeight: number,
  imageWidth: number,
  imageHeight: number,
): PixelPos | null {
  if (clientWidth <= 0 || clientHeight <= 0) return null;
  const col = Math.floor((offsetX / clientWidth) * imageWidth);
  const row = Math.floor((offsetY / clientHeight) * imageHeight);
  if (row < 0 || row >= imageHeight || col < 0 || col >= imageWidth) return null;
  return { row, col };
}

export function imageToCanvas(
  row: number,
  col: number,
  clientWidth: number,
  clientHeight: number,
  imageWidth: number,
  imageHeight: number,
): { x: number; y: number } {
  // center of the pixel, in CSS coordinates
  return {
    x: ((col + 0.5) / imageWidth) * clientWidth,
    y: ((row + 0.5) / imageHeight) * clientHeight,
  };
}
