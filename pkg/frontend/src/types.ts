/** Manifest and data rows of a histo3d scene bundle (see backend README). */

export interface TumorSectionRef {
  image: string;
  section: number;
  z: number;
}

export interface TumorEntry {
  id: string;
  mesh: string;
  patch_dir: string;
  plane_bounds: { x_min: number; x_max: number; y_min: number; y_max: number };
  sections: TumorSectionRef[];
}

export interface BundleManifest {
  sample_id: string;
  organ: {
    mesh: string;
    target_height: number;
    rotation_axis: number[];
    rotation_angle_deg: number;
    geometry: string;
  };
  tumors: TumorEntry[];
  features: { organ: string[]; tumor: Record<string, string[]> };
  colormaps: string;
}

/** One row of a feature CSV. */
export interface FeatureRow {
  index: number;
  x: number;
  y: number;
  z: number;
  value: number;
  normalized: number;
  percentile: number;
  tumorId: string | null;
}

export type FeatureTable = Map<number, FeatureRow>;

export type ColormapTable = Map<string, Uint8Array>; // 256*3 RGB per name
