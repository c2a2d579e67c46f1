export type Plane = 'axial' | 'coronal' | 'sagittal';

export const PLANES: Plane[] = ['axial', 'coronal', 'sagittal'];

export type ClassId = 1 | 2;
export type Polarity = 1 | -1;

/** One brush stroke in slice voxel coordinates (row, col). */
export interface Stroke {
  plane: Plane;
  slice_index: number;
  cls: ClassId;
  polarity: Polarity;
  polyline: [number, number][];
  brush_radius: number;
}

export interface RoundInfo {
  index: number;
  edit_count: number;
  metrics: Record<string, Record<string, number>> | null;
}

export interface SessionInfo {
  id: string;
  shape: [number, number, number];
  has_gt: boolean;
  model_ref: string;
  rounds: RoundInfo[];
}

export interface RleMask {
  shape: number[];
  rle: number[];
}

/** Spatial extent of a slice for a plane, given the (h, w, s) volume shape. */
export function sliceShape(shape: [number, number, number], plane: Plane): [number, number] {
  const [h, w, s] = shape;
  switch (plane) {
    case 'axial':
      return [h, w];
    case 'coronal':
      return [w, s];
    case 'sagittal':
      return [h, s];
  }
}

/** Number of slices along the plane's normal axis. */
export function sliceCount(shape: [number, number, number], plane: Plane): number {
  const [h, w, s] = shape;
  switch (plane) {
    case 'axial':
      return s;
    case 'coronal':
      return h;
    case 'sagittal':
      return w;
  }
}

/** Map a slice coordinate back to a flat (h, w, s) voxel index. */
export function voxelIndex(
  shape: [number, number, number],
  plane: Plane,
  slice: number,
  r: number,
  c: number,
): number {
  const [, w, s] = shape;
  let hh: number, ww: number, ss: number;
  if (plane === 'axial') {
    [hh, ww, ss] = [r, c, slice];
  } else if (plane === 'coronal') {
    [hh, ww, ss] = [slice, r, c];
  } else {
    [hh, ww, ss] = [r, slice, c];
  }
  return (hh * w + ww) * s + ss;
}
