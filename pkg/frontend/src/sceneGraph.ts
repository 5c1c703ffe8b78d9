/**
 * Scene-graph construction and interaction logic, renderer-agnostic.
 *
 * Everything lives under one empty parent positioned at the organ's bbox
 * center, so in-level rotation/offset/scale applied to that parent moves
 * all children while preserving their relative positions. Feature spheres
 * are keyed by patch index in a map: switching feature type only rewrites
 * values and colors on the existing nodes.
 */

import * as THREE from "three";

import { rescaleToVisible, sampleColormap } from "./colormap.js";
import { visibleIndices, visibleValueRange } from "./percentile.js";
import type { FeatureRow, FeatureTable, TumorEntry } from "./types.js";

export const DEFAULT_MAX_VISIBLE = 5000;

export interface FeatureSphere {
  mesh: THREE.Mesh;
  row: FeatureRow;
  pickable: boolean;
}

export class FeatureLayer {
  readonly group = new THREE.Group();
  readonly spheres = new Map<number, FeatureSphere>();
  private table: FeatureTable;
  private readonly maxVisible: number;
  private readonly geometry: THREE.SphereGeometry;
  private visibleSet = new Set<number>();

  constructor(
    table: FeatureTable,
    options: { radius?: number; transparent?: boolean; maxVisible?: number } = {},
  ) {
    this.table = table;
    this.maxVisible = options.maxVisible ?? DEFAULT_MAX_VISIBLE;
    this.geometry = new THREE.SphereGeometry(options.radius ?? 0.012, 12, 8);
    for (const [index, row] of table) {
      const material = new THREE.MeshLambertMaterial({
        transparent: options.transparent ?? false,
        opacity: options.transparent ? 0.55 : 1.0,
      });
      const mesh = new THREE.Mesh(this.geometry, material);
      mesh.position.set(row.x, row.y, row.z);
      mesh.userData.featureIndex = index;
      const sphere: FeatureSphere = { mesh, row, pickable: false };
      this.spheres.set(index, sphere);
      this.group.add(mesh);
    }
  }

  /** Swap to another feature table over the same patch grid: values and
   * colors change, nodes and positions do not. */
  switchFeature(table: FeatureTable): void {
    for (const [index, sphere] of this.spheres) {
      const row = table.get(index);
      if (row) sphere.row = row;
    }
    this.table = table;
  }

  get visible(): Set<number> {
    return new Set(this.visibleSet);
  }

  /**
   * Dragging phase: flip visibility only. Released phase: additionally
   * rescale colors so the full colormap spans the visible value range, and
   * re-enable picking on the visible set.
   */
  applyThreshold(q: number, phase: "dragging" | "released", colormap: Uint8Array): void {
    let visible = visibleIndices(this.table, q);
    if (visible.size > this.maxVisible) {
      const ranked = [...visible].sort(
        (a, b) => this.table.get(b)!.percentile - this.table.get(a)!.percentile,
      );
      visible = new Set(ranked.slice(0, this.maxVisible));
    }
    this.visibleSet = visible;
    for (const [index, sphere] of this.spheres) {
      sphere.mesh.visible = visible.has(index);
    }
    if (phase === "released") {
      const { min, max } = visibleValueRange(this.table, visible);
      for (const [index, sphere] of this.spheres) {
        const inSet = visible.has(index);
        sphere.pickable = inSet;
        if (inSet) {
          const [r, g, b] = sampleColormap(
            colormap,
            rescaleToVisible(sphere.row.value, min, max),
          );
          (sphere.mesh.material as THREE.MeshLambertMaterial).color.setRGB(
            r / 255,
            g / 255,
            b / 255,
          );
        }
      }
    }
  }

  /** Nearest pickable sphere hit by the ray, or null. Hidden or
   * not-yet-released spheres are never picked. */
  pick(raycaster: THREE.Raycaster): FeatureSphere | null {
    this.group.updateWorldMatrix(true, true); // rays test world matrices
    const candidates: THREE.Object3D[] = [];
    for (const sphere of this.spheres.values()) {
      if (sphere.mesh.visible && sphere.pickable) candidates.push(sphere.mesh);
    }
    const hits = raycaster.intersectObjects(candidates, false);
    if (!hits.length) return null;
    const index = hits[0].object.userData.featureIndex as number;
    return this.spheres.get(index) ?? null;
  }

  dispose(): void {
    this.geometry.dispose();
    for (const sphere of this.spheres.values()) {
      (sphere.mesh.material as THREE.Material).dispose();
    }
  }
}

export interface OrganScene {
  /** Empty parent at the organ bbox center; apply level transforms here. */
  root: THREE.Group;
  organMesh: THREE.Mesh;
  tumorMeshes: Map<string, THREE.Mesh>;
  features: FeatureLayer;
}

export function buildOrganScene(
  organGeometry: THREE.BufferGeometry,
  tumorGeometries: Map<string, THREE.BufferGeometry>,
  featureTable: FeatureTable,
  maxVisible: number = DEFAULT_MAX_VISIBLE,
): OrganScene {
  organGeometry.computeBoundingBox();
  const center = new THREE.Vector3();
  organGeometry.boundingBox!.getCenter(center);

  const root = new THREE.Group();
  root.name = "organ-root";
  root.position.copy(center);

  const organMesh = new THREE.Mesh(
    organGeometry,
    new THREE.MeshLambertMaterial({ color: 0xc9a9b8 }),
  );
  organMesh.name = "organ";
  organMesh.position.copy(center.clone().negate());
  root.add(organMesh);

  const tumorMeshes = new Map<string, THREE.Mesh>();
  for (const [id, geometry] of tumorGeometries) {
    const mesh = new THREE.Mesh(
      geometry,
      new THREE.MeshLambertMaterial({
        color: 0x7a4b6e,
        transparent: true, // tumors stay see-through inside the organ
        opacity: 0.45,
        depthWrite: false,
      }),
    );
    mesh.name = `tumor-${id}`;
    mesh.position.copy(center.clone().negate());
    tumorMeshes.set(id, mesh);
    root.add(mesh);
  }

  const features = new FeatureLayer(featureTable, { maxVisible });
  features.group.position.copy(center.clone().negate());
  root.add(features.group);

  return { root, organMesh, tumorMeshes, features };
}

export interface TumorScene {
  root: THREE.Group;
  tumorMesh: THREE.Mesh;
  /** Section planes keyed by stack section index, z strictly increasing. */
  planes: Map<number, THREE.Mesh>;
  features: FeatureLayer | null;
}

export function buildTumorScene(
  entry: TumorEntry,
  tumorGeometry: THREE.BufferGeometry,
  featureTable: FeatureTable | null,
  planeTextures: Map<number, THREE.Texture> = new Map(),
): TumorScene {
  tumorGeometry.computeBoundingBox();
  const center = new THREE.Vector3();
  tumorGeometry.boundingBox!.getCenter(center);

  const root = new THREE.Group();
  root.name = `tumor-root-${entry.id}`;
  root.position.copy(center);

  const tumorMesh = new THREE.Mesh(
    tumorGeometry,
    new THREE.MeshLambertMaterial({
      color: 0x8a5b7e,
      transparent: true,
      opacity: 0.35,
      depthWrite: false,
    }),
  );
  tumorMesh.position.copy(center.clone().negate());
  root.add(tumorMesh);

  const b = entry.plane_bounds;
  const planes = new Map<number, THREE.Mesh>();
  for (const section of entry.sections) {
    const geometry = new THREE.PlaneGeometry(b.x_max - b.x_min, b.y_max - b.y_min);
    const texture = planeTextures.get(section.section) ?? null;
    const material = new THREE.MeshBasicMaterial({
      transparent: true,
      side: THREE.DoubleSide,
      ...(texture ? { map: texture } : { color: 0xffffff, opacity: 0.8 }),
    });
    const plane = new THREE.Mesh(geometry, material);
    plane.name = `section-${section.section}`;
    plane.position.set(
      (b.x_min + b.x_max) / 2 - center.x,
      (b.y_min + b.y_max) / 2 - center.y,
      section.z - center.z,
    );
    planes.set(section.section, plane);
    root.add(plane);
  }

  let features: FeatureLayer | null = null;
  if (featureTable) {
    // transparent so the histological sections stay readable underneath
    features = new FeatureLayer(featureTable, { transparent: true, radius: 0.006 });
    features.group.position.copy(center.clone().negate());
    root.add(features.group);
  }

  return { root, tumorMesh, planes, features };
}

export function setSectionVisible(scene: TumorScene, section: number, visible: boolean): void {
  const plane = scene.planes.get(section);
  if (plane) plane.visible = visible;
}

/** Scale the whole tumor level: mesh and section planes move together. */
export function setTumorScale(scene: TumorScene, scale: number): void {
  scene.root.scale.setScalar(scale);
}
