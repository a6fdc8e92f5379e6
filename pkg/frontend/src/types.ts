/** Shared wire and editor types for the layout studio. */

/** Fractional box coordinates in [x0, y0, x1, y1] order, all in [0, 1]. */
export type BoxCoords = [number, number, number, number];

export interface EditorBox {
  label: string;
  box: BoxCoords;
}

/** The layout document the service and the CLI both accept. */
export interface LayoutDoc {
  lattice: [number, number];
  categories: string;
  boxes: { label: string; box: number[] }[];
  style?: StyleBlock;
}

export interface StyleBlock {
  seed: number;
  per_object_seeds?: number[];
}

export interface SynthesizeResponse {
  image_png: string;
  label_map_png: string;
  masks_png: string[];
  labels: string[];
  image_seed: number;
  object_seeds: number[];
  resolution: number;
}

export interface CategoriesInfo {
  name: string;
  categories: string[];
  background_index: number;
  palette: number[][];
}

export interface HealthInfo {
  status: string;
  resolution: number;
  step: number;
}

export interface ErrorBody {
  error: string;
  violations?: string[];
}

/** A session file: the layout document plus editor-only metadata. */
export interface SessionDoc extends LayoutDoc {
  studio?: {
    locks: boolean[];
    version: number;
  };
}
