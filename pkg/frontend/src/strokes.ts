import type { Stroke } from './types.js';

/**
 * Client-side mirror of the server's stroke rasterization (integer Bresenham
 * polyline plus circular dilation, clipped to the slice). Used for local
 * previews and for verifying stroke round-trips.
 */
export function digitalLine(p0: [number, number], p1: [number, number]): [number, number][] {
  let [r, c] = [Math.round(p0[0]), Math.round(p0[1])];
  const [r1, c1] = [Math.round(p1[0]), Math.round(p1[1])];
  const dr = Math.abs(r1 - r);
  const dc = Math.abs(c1 - c);
  const sr = r1 >= r ? 1 : -1;
  const sc = c1 >= c ? 1 : -1;
  let err = dr - dc;
  const points: [number, number][] = [];
  for (;;) {
    points.push([r, c]);
    if (r === r1 && c === c1) break;
    const e2 = 2 * err;
    if (e2 > -dc) {
      err -= dc;
      r += sr;
    }
    if (e2 < dr) {
      err += dr;
      c += sc;
    }
  }
  return points;
}

export function diskOffsets(radius: number): [number, number][] {
  const out: [number, number][] = [];
  for (let dr = -radius; dr <= radius; dr++) {
    for (let dc = -radius; dc <= radius; dc++) {
      if (dr * dr + dc * dc <= radius * radius) out.push([dr, dc]);
    }
  }
  return out;
}

/** All voxels a stroke covers, deduplicated and clipped to the slice. */
export function rasterizeStroke(stroke: Stroke, sliceShape: [number, number]): [number, number][] {
  const line: [number, number][] = [];
  const pts = stroke.polyline;
  if (pts.length === 1) {
    line.push([Math.round(pts[0][0]), Math.round(pts[0][1])]);
  } else {
    for (let i = 0; i + 1 < pts.length; i++) {
      line.push(...digitalLine(pts[i], pts[i + 1]));
    }
  }
  const offsets = stroke.brush_radius > 0 ? diskOffsets(stroke.brush_radius) : [[0, 0]];
  const seen = new Set<number>();
  const out: [number, number][] = [];
  for (const [r, c] of line) {
    for (const [dr, dc] of offsets) {
      const rr = r + dr;
      const cc = c + dc;
      if (rr < 0 || rr >= sliceShape[0] || cc < 0 || cc >= sliceShape[1]) continue;
      const key = rr * sliceShape[1] + cc;
      if (!seen.has(key)) {
        seen.add(key);
        out.push([rr, cc]);
      }
    }
  }
  return out;
}

/** Drop consecutive duplicate points produced by slow pointer movement. */
export function simplifyPath(points: [number, number][]): [number, number][] {
  const out: [number, number][] = [];
  for (const p of points) {
    const last = out[out.length - 1];
    if (!last || last[0] !== p[0] || last[1] !== p[1]) out.push(p);
  }
  return out;
}
