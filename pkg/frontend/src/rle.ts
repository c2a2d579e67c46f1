import type { RleMask } from './types.js';

/** Decode the service's row-major [value, length, ...] run list. */
export function decodeRle(mask: RleMask): Uint8Array {
  const total = mask.shape.reduce((a, b) => a * b, 1);
  const out = new Uint8Array(total);
  let pos = 0;
  for (let i = 0; i < mask.rle.length; i += 2) {
    const value = mask.rle[i];
    const length = mask.rle[i + 1];
    if (value !== 0) {
      out.fill(value, pos, pos + length);
    }
    pos += length;
  }
  if (pos !== total) {
    throw new Error(`RLE covers ${pos} voxels, expected ${total}`);
  }
  return out;
}

export function encodeRle(data: Uint8Array, shape: number[]): RleMask {
  const total = shape.reduce((a, b) => a * b, 1);
  if (data.length !== total) {
    throw new Error(`buffer length ${data.length} does not match shape ${shape}`);
  }
  const rle: number[] = [];
  let i = 0;
  while (i < data.length) {
    const value = data[i];
    let j = i;
    while (j < data.length && data[j] === value) j++;
    rle.push(value, j - i);
    i = j;
  }
  return { shape, rle };
}

/** Extract one 2D slice (row-major) out of a flat (h, w, s) volume buffer. */
export function sliceOf(
  data: Uint8Array,
  shape: [number, number, number],
  plane: 'axial' | 'coronal' | 'sagittal',
  index: number,
): Uint8Array {
  const [h, w, s] = shape;
  if (plane === 'axial') {
    const out = new Uint8Array(h * w);
    for (let r = 0; r < h; r++)
      for (let c = 0; c < w; c++) out[r * w + c] = data[(r * w + c) * s + index];
    return out;
  }
  if (plane === 'coronal') {
    const out = new Uint8Array(w * s);
    for (let r = 0; r < w; r++)
      for (let c = 0; c < s; c++) out[r * s + c] = data[(index * w + r) * s + c];
    return out;
  }
  const out = new Uint8Array(h * s);
  for (let r = 0; r < h; r++)
    for (let c = 0; c < s; c++) out[r * s + c] = data[(r * w + index) * s + c];
  return out;
}
