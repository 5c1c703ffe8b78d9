/**
 * Viewer state and its reducer.
 *
 * Every transition is a pure function of (state, event); replaying an event
 * log from the initial state reproduces the final state exactly, which the
 * tests rely on. Rendering reads the state, never mutates it.
 */

export type Level = "organ" | "tumor";
export type RenderMode = "spheres" | "particles";
export type ThresholdPhase = "dragging" | "released";

export interface ModelTransform {
  rotationY: number; // radians
  verticalOffset: number; // model units
  scale: number;
}

export interface ViewerState {
  sampleId: string | null;
  level: Level;
  tumorId: string | null; // set iff level === "tumor"
  featureName: string | null;
  threshold: number; // q in [0, 100]
  thresholdPhase: ThresholdPhase;
  mode: RenderMode;
  colormap: string;
  sectionVisibility: Record<number, boolean>; // tumor level, by section index
  transform: ModelTransform;
}

export type ViewerEvent =
  | { kind: "bundle-loaded"; sampleId: string; firstFeature: string | null }
  | { kind: "select-feature"; name: string }
  | { kind: "set-threshold"; q: number; phase: ThresholdPhase }
  | { kind: "set-mode"; mode: RenderMode }
  | { kind: "set-colormap"; name: string }
  | { kind: "enter-tumor"; tumorId: string; sections: number[] }
  | { kind: "exit-tumor" }
  | { kind: "toggle-section"; section: number }
  | { kind: "set-transform"; transform: Partial<ModelTransform> };

export const INITIAL_STATE: ViewerState = {
  sampleId: null,
  level: "organ",
  tumorId: null,
  featureName: null,
  threshold: 80,
  thresholdPhase: "released",
  mode: "spheres",
  colormap: "bone",
  sectionVisibility: {},
  transform: { rotationY: 0, verticalOffset: 0, scale: 1 },
};

export function reduce(state: ViewerState, event: ViewerEvent): ViewerState {
  switch (event.kind) {
    case "bundle-loaded":
      return {
        ...INITIAL_STATE,
        sampleId: event.sampleId,
        featureName: event.firstFeature,
        threshold: state.threshold,
        colormap: state.colormap,
        mode: state.mode,
      };
    case "select-feature":
      return { ...state, featureName: event.name };
    case "set-threshold": {
      const q = Math.min(Math.max(event.q, 0), 100);
      return { ...state, threshold: q, thresholdPhase: event.phase };
    }
    case "set-mode":
      return { ...state, mode: event.mode };
    case "set-colormap":
      return { ...state, colormap: event.name };
    case "enter-tumor": {
      const visibility: Record<number, boolean> = {};
      for (const s of event.sections) visibility[s] = true;
      return {
        ...state,
        level: "tumor",
        tumorId: event.tumorId,
        sectionVisibility: visibility,
        transform: { rotationY: 0, verticalOffset: 0, scale: 1 },
      };
    }
    case "exit-tumor":
      // organ-level feature/threshold/colormap survive the round trip
      return { ...state, level: "organ", tumorId: null, sectionVisibility: {} };
    case "toggle-section": {
      if (state.level !== "tumor") return state;
      const visibility = { ...state.sectionVisibility };
      visibility[event.section] = !(visibility[event.section] ?? true);
      return { ...state, sectionVisibility: visibility };
    }
    case "set-transform":
      return { ...state, transform: { ...state.transform, ...event.transform } };
  }
}

export function replay(events: ViewerEvent[], start: ViewerState = INITIAL_STATE): ViewerState {
  return events.reduce(reduce, start);
}

/** Shareable-view hash: sample, level, tumor, feature, threshold. */
export function encodeHash(state: ViewerState): string {
  const parts: string[] = [];
  if (state.sampleId) parts.push(`s=${encodeURIComponent(state.sampleId)}`);
  parts.push(`l=${state.level}`);
  if (state.tumorId) parts.push(`t=${encodeURIComponent(state.tumorId)}`);
  if (state.featureName) parts.push(`f=${encodeURIComponent(state.featureName)}`);
  parts.push(`q=${state.threshold}`);
  return "#" + parts.join("&");
}

export interface HashState {
  sampleId: string | null;
  level: Level;
  tumorId: string | null;
  featureName: string | null;
  threshold: number | null;
}

export function decodeHash(hash: string): HashState {
  const out: HashState = {
    sampleId: null,
    level: "organ",
    tumorId: null,
    featureName: null,
    threshold: null,
  };
  for (const pair of hash.replace(/^#/, "").split("&")) {
    const eq = pair.indexOf("=");
    if (eq < 0) continue;
    const key = pair.slice(0, eq);
    const value = decodeURIComponent(pair.slice(eq + 1));
    if (key === "s") out.sampleId = value;
    else if (key === "l" && (value === "organ" || value === "tumor")) out.level = value;
    else if (key === "t") out.tumorId = value;
    else if (key === "f") out.featureName = value;
    else if (key === "q") {
      const q = Number(value);
      if (Number.isFinite(q)) out.threshold = Math.min(Math.max(q, 0), 100);
    }
  }
  if (out.level !== "tumor") out.tumorId = null;
  return out;
}
