import { rasterizeStroke, simplifyPath } from './strokes.js';
import type { ClassId, Plane, Polarity, Stroke } from './types.js';
import { sliceCount, sliceShape } from './types.js';

/** Overlay colors, loosely following the editor's GUI semantics: predicted
 * GGO in pink, predicted CONS in dark green; foreground edit previews in
 * magenta (GGO) and neon green (CONS), background edits in blue. */
export const LABEL_COLORS: Record<number, [number, number, number]> = {
  1: [236, 100, 150],
  2: [40, 120, 70],
};
export const STROKE_COLORS: Record<string, [number, number, number]> = {
  '1:1': [255, 0, 255],
  '2:1': [57, 255, 20],
  '1:-1': [60, 120, 255],
  '2:-1': [30, 80, 200],
};

export interface Tool {
  cls: ClassId;
  polarity: Polarity;
  radius: number;
}

/**
 * Pure view-model of the scribble editor: which slice is shown, which round
 * is displayed, the active brush and the pending (unsubmitted) strokes.
 * Rendering and HTTP stay outside; tests drive this class directly.
 */
export class ViewerState {
  plane: Plane = 'axial';
  sliceIndex = 0;
  opacity = 0.5;
  tool: Tool = { cls: 1, polarity: 1, radius: 0 };
  pending: Stroke[] = [];
  roundCursor = 0; // round whose mask is displayed
  latestRound = 0; // highest round known from the server
  compareWith: number | null = null;

  private activePath: [number, number][] | null = null;

  constructor(public shape: [number, number, number]) {}

  currentSliceShape(): [number, number] {
    return sliceShape(this.shape, this.plane);
  }

  currentSliceCount(): number {
    return sliceCount(this.shape, this.plane);
  }

  setPlane(plane: Plane): void {
    if (plane === this.plane) return;
    this.finishStroke();
    this.plane = plane;
    // the round being inspected is preserved across plane switches
    this.sliceIndex = Math.min(this.sliceIndex, this.currentSliceCount() - 1);
  }

  setSlice(index: number): void {
    this.finishStroke();
    this.sliceIndex = Math.max(0, Math.min(index, this.currentSliceCount() - 1));
  }

  setRoundCursor(round: number): void {
    if (round < 1 || round > this.latestRound) {
      throw new Error(`round ${round} outside 1..${this.latestRound}`);
    }
    this.roundCursor = round;
  }

  observeRound(index: number): void {
    this.latestRound = Math.max(this.latestRound, index);
    this.roundCursor = index;
  }

  beginStroke(r: number, c: number): void {
    const [rows, cols] = this.currentSliceShape();
    if (r < 0 || r >= rows || c < 0 || c >= cols) return;
    this.activePath = [[Math.round(r), Math.round(c)]];
  }

  extendStroke(r: number, c: number): void {
    if (!this.activePath) return;
    const [rows, cols] = this.currentSliceShape();
    const rr = Math.max(0, Math.min(Math.round(r), rows - 1));
    const cc = Math.max(0, Math.min(Math.round(c), cols - 1));
    this.activePath.push([rr, cc]);
  }

  finishStroke(): Stroke | null {
    if (!this.activePath) return null;
    const path = simplifyPath(this.activePath);
    this.activePath = null;
    if (path.length === 0) return null;
    const stroke: Stroke = {
      plane: this.plane,
      slice_index: this.sliceIndex,
      cls: this.tool.cls,
      polarity: this.tool.polarity,
      polyline: path,
      brush_radius: this.tool.radius,
    };
    this.pending.push(stroke);
    return stroke;
  }

  /** Undo removes only pending strokes; submitted rounds are immutable. */
  undoPending(): Stroke | undefined {
    this.activePath = null;
    return this.pending.pop();
  }

  takePendingForSubmit(): Stroke[] {
    this.finishStroke();
    const strokes = this.pending;
    this.pending = [];
    return strokes;
  }

  pendingOnCurrentView(): Stroke[] {
    return this.pending.filter(
      (s) => s.plane === this.plane && s.slice_index === this.sliceIndex,
    );
  }
}

/**
 * Compose a grayscale slice, a label overlay and pending stroke previews
 * into an RGBA buffer (row-major, 4 bytes per pixel).
 */
export function compositeSlice(
  gray: Uint8Array,
  labels: Uint8Array | null,
  shape: [number, number],
  opacity: number,
  pendingStrokes: Stroke[] = [],
): Uint8ClampedArray<ArrayBuffer> {
  const [rows, cols] = shape;
  const out = new Uint8ClampedArray(rows * cols * 4);
  for (let i = 0; i < rows * cols; i++) {
    const g = gray[i];
    out[4 * i] = g;
    out[4 * i + 1] = g;
    out[4 * i + 2] = g;
    out[4 * i + 3] = 255;
    const cls = labels ? labels[i] : 0;
    if (cls > 0) {
      const color = LABEL_COLORS[cls];
      out[4 * i] = Math.round((1 - opacity) * g + opacity * color[0]);
      out[4 * i + 1] = Math.round((1 - opacity) * g + opacity * color[1]);
      out[4 * i + 2] = Math.round((1 - opacity) * g + opacity * color[2]);
    }
  }
  for (const stroke of pendingStrokes) {
    const color = STROKE_COLORS[`${stroke.cls}:${stroke.polarity}`];
    for (const [r, c] of rasterizeStroke(stroke, shape)) {
      const i = r * cols + c;
      out[4 * i] = color[0];
      out[4 * i + 1] = color[1];
      out[4 * i + 2] = color[2];
      out[4 * i + 3] = 255;
    }
  }
  return out;
}

/** Voxels whose label differs between two rounds' masks (for comparison). */
export function maskDiff(a: Uint8Array, b: Uint8Array): number[] {
  const out: number[] = [];
  const n = Math.min(a.length, b.length);
  for (let i = 0; i < n; i++) {
    if (a[i] !== b[i]) out.push(i);
  }
  return out;
}
