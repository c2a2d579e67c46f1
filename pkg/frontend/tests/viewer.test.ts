import { describe, expect, it } from 'vitest';

import { rasterizeStroke, digitalLine, simplifyPath } from '../src/strokes.js';
import { ViewerState, compositeSlice, maskDiff, LABEL_COLORS, STROKE_COLORS } from '../src/viewer.js';

const SHAPE: [number, number, number] = [20, 22, 24];

describe('strokes', () => {
  it('digital lines include both endpoints and stay 8-connected', () => {
    for (const [p0, p1] of [
      [[0, 0], [5, 2]],
      [[7, 3], [0, 9]],
      [[4, 4], [4, 4]],
      [[9, 0], [0, 0]],
    ] as [[number, number], [number, number]][]) {
      const line = digitalLine(p0, p1);
      expect(line[0]).toEqual(p0);
      expect(line[line.length - 1]).toEqual(p1);
      for (let i = 1; i < line.length; i++) {
        const dr = Math.abs(line[i][0] - line[i - 1][0]);
        const dc = Math.abs(line[i][1] - line[i - 1][1]);
        expect(Math.max(dr, dc)).toBe(1);
      }
    }
  });

  it('rasterization clips the brush to the slice', () => {
    const voxels = rasterizeStroke(
      { plane: 'axial', slice_index: 0, cls: 1, polarity: 1, polyline: [[0, 0]], brush_radius: 3 },
      [8, 8],
    );
    for (const [r, c] of voxels) {
      expect(r).toBeGreaterThanOrEqual(0);
      expect(c).toBeGreaterThanOrEqual(0);
    }
  });

  it('simplifyPath drops consecutive duplicates only', () => {
    expect(simplifyPath([[1, 1], [1, 1], [2, 2], [2, 2], [1, 1]])).toEqual([
      [1, 1], [2, 2], [1, 1],
    ]);
  });
});

describe('ViewerState', () => {
  it('captures pointer paths into pending strokes in voxel coords', () => {
    const state = new ViewerState(SHAPE);
    state.tool = { cls: 2, polarity: -1, radius: 1 };
    state.setSlice(5);
    state.beginStroke(2, 3);
    state.extendStroke(4, 6);
    state.extendStroke(4, 6);
    const stroke = state.finishStroke();
    expect(stroke).not.toBeNull();
    expect(stroke!.plane).toBe('axial');
    expect(stroke!.slice_index).toBe(5);
    expect(stroke!.cls).toBe(2);
    expect(stroke!.polarity).toBe(-1);
    expect(stroke!.polyline).toEqual([[2, 3], [4, 6]]);
    expect(state.pending).toHaveLength(1);
  });

  it('clamps stroke points to slice bounds', () => {
    const state = new ViewerState(SHAPE);
    state.beginStroke(1, 1);
    state.extendStroke(999, -5);
    const stroke = state.finishStroke()!;
    expect(stroke.polyline[1]).toEqual([19, 0]); // axial slices are h x w
  });

  it('undo removes only pending strokes; rounds are immutable', () => {
    const state = new ViewerState(SHAPE);
    state.observeRound(1);
    state.observeRound(2);
    state.beginStroke(1, 1);
    state.finishStroke();
    state.beginStroke(2, 2);
    state.finishStroke();
    expect(state.pending).toHaveLength(2);
    state.undoPending();
    expect(state.pending).toHaveLength(1);
    expect(state.latestRound).toBe(2);
    state.undoPending();
    state.undoPending();
    expect(state.pending).toHaveLength(0);
    expect(state.latestRound).toBe(2); // history untouched
  });

  it('plane switching preserves the round cursor', () => {
    const state = new ViewerState(SHAPE);
    state.observeRound(1);
    state.observeRound(2);
    state.setRoundCursor(1);
    state.setSlice(19);
    state.setPlane('sagittal');
    expect(state.roundCursor).toBe(1);
    expect(state.sliceIndex).toBeLessThan(state.currentSliceCount());
    expect(state.currentSliceCount()).toBe(22);
  });

  it('rejects a round cursor beyond the latest server round', () => {
    const state = new ViewerState(SHAPE);
    state.observeRound(1);
    expect(() => state.setRoundCursor(2)).toThrow();
  });

  it('takePendingForSubmit clears the pending list', () => {
    const state = new ViewerState(SHAPE);
    state.beginStroke(1, 1);
    const taken = state.takePendingForSubmit();
    expect(taken).toHaveLength(1);
    expect(state.pending).toHaveLength(0);
  });
});

describe('compositeSlice', () => {
  const gray = new Uint8Array(16).fill(100);

  it('blends label colors by opacity and leaves background untouched', () => {
    const labels = new Uint8Array(16);
    labels[5] = 1;
    const rgba = compositeSlice(gray, labels, [4, 4], 0.5);
    expect(rgba[4 * 0]).toBe(100); // background pixel
    const expected = Math.round(0.5 * 100 + 0.5 * LABEL_COLORS[1][0]);
    expect(rgba[4 * 5]).toBe(expected);
  });

  it('draws pending stroke previews in the class color', () => {
    const rgba = compositeSlice(gray, null, [4, 4], 0.5, [
      { plane: 'axial', slice_index: 0, cls: 2, polarity: 1, polyline: [[1, 0], [1, 3]], brush_radius: 0 },
    ]);
    const color = STROKE_COLORS['2:1'];
    for (let c = 0; c < 4; c++) {
      const i = 1 * 4 + c;
      expect([rgba[4 * i], rgba[4 * i + 1], rgba[4 * i + 2]]).toEqual(color);
    }
  });

  it('maskDiff finds exactly the changed voxels', () => {
    const a = new Uint8Array([0, 1, 2, 0]);
    const b = new Uint8Array([0, 2, 2, 1]);
    expect(maskDiff(a, b)).toEqual([1, 3]);
  });
});
