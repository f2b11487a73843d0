/**
 * Run-length encoded masks as produced by the session service: row-major,
 * counts alternating background/foreground runs, starting with background
 * (possibly a zero-length run).
 */

export interface RleMask {
  counts: number[];
  order: "row-major";
  height: number;
  width: number;
}

export function decodeRle(mask: RleMask): Uint8Array {
  const out = new Uint8Array(mask.height * mask.width);
  let pos = 0;
  let value = 0;
  for (const run of mask.counts) {
    if (value === 1) out.fill(1, pos, pos + run);
    pos += run;
    value = 1 - value;
  }
  if (pos !== out.length) {
    throw new Error(`rle covers ${pos} pixels, mask has ${out.length}`);
  }
  return out;
}

export function encodeRle(flat: Uint8Array, height: number, width: number): RleMask {
  if (flat.length !== height * width) {
    throw new Error("mask length does not match dimensions");
  }
  const counts: number[] = [];
  let current = 0;
  let run = 0;
  for (const v of flat) {
    const bit = v ? 1 : 0;
    if (bit === current) {
      run += 1;
    } else {
      counts.push(run);
      current = bit;
      run = 1;
    }
  }
  counts.push(run);
  return { counts, order: "row-major", height, width };
}

export function masksEqual(a: RleMask, b: RleMask): boolean {
  return (
    a.height === b.height &&
    a.width === b.width &&
    a.counts.length === b.counts.length &&
    a.counts.every((c, i) => c === b.counts[i])
  );
}
