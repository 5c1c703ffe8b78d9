/**
 * Browser entry point: renders a served bundle with two levels (organ and
 * tumor), a side menu (sample, feature, threshold, colormap, mode), sphere
 * picking with patch popups, and URL-hash shareable views.
 */

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";

import { BundleClient, featureNameFromRef } from "./api.js";
import { PatchPanel } from "./panel.js";
import { DEFAULT_PARTICLE_RANGE, emitterParams } from "./particles.js";
import { ResourceRegistry } from "./resources.js";
import {
  FeatureLayer,
  OrganScene,
  TumorScene,
  buildOrganScene,
  buildTumorScene,
  setSectionVisible,
  setTumorScale,
} from "./sceneGraph.js";
import {
  INITIAL_STATE,
  ViewerEvent,
  ViewerState,
  decodeHash,
  encodeHash,
  reduce,
} from "./state.js";
import { parseBinaryStl } from "./stl.js";
import type { BundleManifest, ColormapTable, FeatureTable } from "./types.js";

const BUNDLE_URL = new URLSearchParams(location.search).get("bundle") ?? "http://localhost:8080";

interface LoadedData {
  manifest: BundleManifest;
  colormaps: ColormapTable;
  organFeatures: Map<string, FeatureTable>;
  tumorFeatures: Map<string, Map<string, FeatureTable>>;
  organGeometry: THREE.BufferGeometry;
  tumorGeometries: Map<string, THREE.BufferGeometry>;
}

class ViewerApp {
  private state: ViewerState = INITIAL_STATE;
  private data!: LoadedData;
  private client = new BundleClient(BUNDLE_URL);
  private registry = new ResourceRegistry();
  private panel!: PatchPanel;

  private renderer!: THREE.WebGLRenderer;
  private scene = new THREE.Scene();
  private camera!: THREE.PerspectiveCamera;
  private controls!: OrbitControls;
  private raycaster = new THREE.Raycaster();

  private organScene: OrganScene | null = null;
  private tumorScene: TumorScene | null = null;
  private particles: ParticleField | null = null;

  async start(): Promise<void> {
    this.setupRenderer();
    this.panel = new PatchPanel(this.registry, async (url) => {
      const texture = await new THREE.TextureLoader().loadAsync(url);
      return { dispose: () => texture.dispose() };
    });
    try {
      this.data = await this.loadBundle();
    } catch (err) {
      showError(String(err));
      return;
    }
    const firstFeature = this.data.manifest.features.organ.length
      ? featureNameFromRef(this.data.manifest.features.organ[0])
      : null;
    this.dispatch({
      kind: "bundle-loaded",
      sampleId: this.data.manifest.sample_id,
      firstFeature,
    });
    this.applyHash();
    this.buildMenu();
    this.rebuildLevel();
    this.animate();
  }

  private setupRenderer(): void {
    this.renderer = new THREE.WebGLRenderer({ antialias: true });
    this.renderer.setSize(innerWidth, innerHeight);
    this.renderer.setPixelRatio(devicePixelRatio);
    document.getElementById("canvas-host")!.appendChild(this.renderer.domElement);
    this.camera = new THREE.PerspectiveCamera(50, innerWidth / innerHeight, 0.001, 100);
    this.camera.position.set(0, -3.2, 1.6);
    this.camera.up.set(0, 0, 1); // model space is z-up
    this.controls = new OrbitControls(this.camera, this.renderer.domElement);
    this.scene.background = new THREE.Color(0x10131a);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.65));
    const key = new THREE.DirectionalLight(0xffffff, 1.1);
    key.position.set(2, -3, 4);
    this.scene.add(key);
    addEventListener("resize", () => {
      this.camera.aspect = innerWidth / innerHeight;
      this.camera.updateProjectionMatrix();
      this.renderer.setSize(innerWidth, innerHeight);
    });
    this.renderer.domElement.addEventListener("click", (ev) => this.onClick(ev));
  }

  private async loadBundle(): Promise<LoadedData> {
    const manifest = await this.client.manifest();
    const colormaps = await this.client.colormaps(manifest.colormaps);
    const organFeatures = new Map<string, FeatureTable>();
    for (const ref of manifest.features.organ) {
      organFeatures.set(featureNameFromRef(ref), await this.client.featureTable(ref));
    }
    const tumorFeatures = new Map<string, Map<string, FeatureTable>>();
    for (const [tid, refs] of Object.entries(manifest.features.tumor)) {
      const tables = new Map<string, FeatureTable>();
      for (const ref of refs) {
        tables.set(featureNameFromRef(ref), await this.client.featureTable(ref));
      }
      tumorFeatures.set(tid, tables);
    }
    const organGeometry = parseBinaryStl(await this.client.binary(manifest.organ.mesh));
    const tumorGeometries = new Map<string, THREE.BufferGeometry>();
    for (const tumor of manifest.tumors) {
      tumorGeometries.set(tumor.id, parseBinaryStl(await this.client.binary(tumor.mesh)));
    }
    return { manifest, colormaps, organFeatures, tumorFeatures, organGeometry, tumorGeometries };
  }

  private dispatch(event: ViewerEvent): void {
    const before = this.state;
    this.state = reduce(this.state, event);
    history.replaceState(null, "", encodeHash(this.state));
    if (before.level !== this.state.level || before.tumorId !== this.state.tumorId) {
      this.panel.close();
      this.rebuildLevel();
    } else if (
      before.featureName !== this.state.featureName ||
      before.colormap !== this.state.colormap ||
      before.mode !== this.state.mode
    ) {
      this.refreshFeatures();
    } else if (
      before.threshold !== this.state.threshold ||
      before.thresholdPhase !== this.state.thresholdPhase
    ) {
      this.applyThreshold();
    }
    if (event.kind === "toggle-section" && this.tumorScene) {
      setSectionVisible(
        this.tumorScene,
        event.section,
        this.state.sectionVisibility[event.section] ?? true,
      );
    }
    if (event.kind === "set-transform") {
      this.applyTransform();
    }
    this.syncMenu();
  }

  private applyHash(): void {
    const hash = decodeHash(location.hash);
    if (hash.featureName) this.dispatch({ kind: "select-feature", name: hash.featureName });
    if (hash.threshold !== null) {
      this.dispatch({ kind: "set-threshold", q: hash.threshold, phase: "released" });
    }
    if (hash.level === "tumor" && hash.tumorId) {
      const entry = this.data.manifest.tumors.find((t) => t.id === hash.tumorId);
      if (entry) {
        this.dispatch({
          kind: "enter-tumor",
          tumorId: entry.id,
          sections: entry.sections.map((s) => s.section),
        });
      }
    }
  }

  private activeLayer(): FeatureLayer | null {
    if (this.state.level === "organ") return this.organScene?.features ?? null;
    return this.tumorScene?.features ?? null;
  }

  private activeTable(): FeatureTable | null {
    const name = this.state.featureName;
    if (!name) return null;
    if (this.state.level === "organ") return this.data.organFeatures.get(name) ?? null;
    return this.data.tumorFeatures.get(this.state.tumorId ?? "")?.get(name) ?? null;
  }

  private rebuildLevel(): void {
    if (this.organScene) this.scene.remove(this.organScene.root);
    if (this.tumorScene) this.scene.remove(this.tumorScene.root);
    this.particles?.dispose(this.scene);
    this.particles = null;

    if (this.state.level === "organ") {
      const table = this.activeTable() ?? new Map();
      this.organScene = buildOrganScene(
        this.data.organGeometry,
        this.data.tumorGeometries,
        table,
      );
      this.scene.add(this.organScene.root);
      this.tumorScene = null;
    } else {
      const entry = this.data.manifest.tumors.find((t) => t.id === this.state.tumorId)!;
      const geometry = this.data.tumorGeometries.get(entry.id)!;
      this.tumorScene = buildTumorScene(entry, geometry.clone(), this.activeTable());
      this.scene.add(this.tumorScene.root);
      this.organScene = null;
      void this.loadSectionTextures(entry);
    }
    this.applyThreshold();
    this.applyTransform();
  }

  private async loadSectionTextures(entry: (typeof this.data.manifest.tumors)[number]): Promise<void> {
    for (const section of entry.sections) {
      try {
        const texture = await new THREE.TextureLoader().loadAsync(this.client.url(section.image));
        const plane = this.tumorScene?.planes.get(section.section);
        if (plane) {
          const material = plane.material as THREE.MeshBasicMaterial;
          material.map = texture;
          material.opacity = 1.0;
          material.needsUpdate = true;
        }
      } catch {
        // missing section image: plane stays as a placeholder
      }
    }
  }

  private refreshFeatures(): void {
    const layer = this.activeLayer();
    const table = this.activeTable();
    if (layer && table) layer.switchFeature(table);
    this.applyThreshold();
  }

  private applyThreshold(): void {
    const layer = this.activeLayer();
    if (!layer) return;
    const colormap =
      this.data.colormaps.get(this.state.colormap) ?? this.data.colormaps.values().next().value!;
    layer.applyThreshold(this.state.threshold, this.state.thresholdPhase, colormap);
    layer.group.visible = this.state.mode === "spheres";
    if (this.state.mode === "particles" && this.state.thresholdPhase === "released") {
      this.particles?.dispose(this.scene);
      const table = this.activeTable();
      if (table) {
        this.particles = new ParticleField(layer, table, colormap);
        const host = this.state.level === "organ" ? this.organScene!.root : this.tumorScene!.root;
        this.particles.attach(host);
      }
    } else if (this.state.mode === "spheres") {
      this.particles?.dispose(this.scene);
      this.particles = null;
    }
    drawColorbar(colormap);
  }

  private applyTransform(): void {
    const root = this.state.level === "organ" ? this.organScene?.root : this.tumorScene?.root;
    if (!root) return;
    const t = this.state.transform;
    root.rotation.set(0, 0, t.rotationY);
    root.position.z = t.verticalOffset;
    root.scale.setScalar(t.scale);
  }

  private onClick(ev: MouseEvent): void {
    if (this.state.mode !== "spheres") return;
    const layer = this.activeLayer();
    if (!layer) return;
    const ndc = new THREE.Vector2(
      (ev.clientX / innerWidth) * 2 - 1,
      -(ev.clientY / innerHeight) * 2 + 1,
    );
    this.raycaster.setFromCamera(ndc, this.camera);
    const hit = layer.pick(this.raycaster);
    if (!hit) {
      // tumor selection with the off-hand: clicking a tumor mesh dives in
      if (this.state.level === "organ" && this.organScene) {
        const meshes = [...this.organScene.tumorMeshes.entries()];
        for (const [tid, mesh] of meshes) {
          if (this.raycaster.intersectObject(mesh, false).length) {
            const entry = this.data.manifest.tumors.find((t) => t.id === tid)!;
            this.dispatch({
              kind: "enter-tumor",
              tumorId: tid,
              sections: entry.sections.map((s) => s.section),
            });
            return;
          }
        }
      }
      return;
    }
    const patchDir =
      this.state.level === "organ"
        ? this.client.url("patches/organ")
        : this.client.url(`patches/tumor/${this.state.tumorId}`);
    void this.panel
      .open(this.state.featureName ?? "", hit.row, patchDir)
      .then(() => renderPanelDom(this.panel));
  }

  private buildMenu(): void {
    const features = [...this.data.organFeatures.keys()].sort();
    const colormaps = [...this.data.colormaps.keys()].sort();
    buildMenuDom(this.data.manifest, features, colormaps, (event) => this.dispatch(event));
    this.syncMenu();
  }

  private syncMenu(): void {
    syncMenuDom(this.state, this.data.manifest);
  }

  private animate = (): void => {
    requestAnimationFrame(this.animate);
    this.controls.update();
    this.particles?.step(1 / 60);
    this.renderer.render(this.scene, this.camera);
  };
}

/** Pooled particle cloud: per visible instance, spawn rate and lifetime
 * scale with the normalized value, so dense regions read as hot. */
class ParticleField {
  private points: THREE.Points;
  private positions: Float32Array;
  private life: Float32Array;
  private maxLife: Float32Array;
  private emitters: { x: number; y: number; z: number; rate: number; life: number; color: [number, number, number] }[] = [];
  private cursor = 0;
  private colors: Float32Array;

  constructor(layer: FeatureLayer, table: FeatureTable, colormap: Uint8Array, capacity = 20000) {
    for (const index of layer.visible) {
      const row = table.get(index)!;
      const params = emitterParams(row.normalized, DEFAULT_PARTICLE_RANGE);
      const t = Math.min(Math.max(row.normalized, 0), 1);
      const ci = Math.min(Math.floor(t * 256), 255);
      this.emitters.push({
        x: row.x,
        y: row.y,
        z: row.z,
        rate: params.spawnRate,
        life: params.lifetime,
        color: [colormap[3 * ci] / 255, colormap[3 * ci + 1] / 255, colormap[3 * ci + 2] / 255],
      });
    }
    this.positions = new Float32Array(capacity * 3);
    this.colors = new Float32Array(capacity * 3);
    this.life = new Float32Array(capacity);
    this.maxLife = new Float32Array(capacity);
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute("position", new THREE.BufferAttribute(this.positions, 3));
    geometry.setAttribute("color", new THREE.BufferAttribute(this.colors, 3));
    this.points = new THREE.Points(
      geometry,
      new THREE.PointsMaterial({ size: 0.01, vertexColors: true, transparent: true }),
    );
    this.points.frustumCulled = false;
  }

  attach(parent: THREE.Object3D): void {
    // particles live in the same local frame as the feature spheres
    this.points.position.copy(
      (parent.children.find((c) => c.type === "Group") ?? parent).position,
    );
    parent.add(this.points);
  }

  step(dt: number): void {
    for (let i = 0; i < this.life.length; i++) {
      if (this.life[i] > 0) this.life[i] -= dt;
    }
    for (const e of this.emitters) {
      const n = Math.random() < e.rate * dt ? 1 : 0;
      for (let k = 0; k < n; k++) {
        const slot = this.cursor;
        this.cursor = (this.cursor + 1) % this.maxLife.length;
        this.positions[3 * slot] = e.x + (Math.random() - 0.5) * 0.02;
        this.positions[3 * slot + 1] = e.y + (Math.random() - 0.5) * 0.02;
        this.positions[3 * slot + 2] = e.z + (Math.random() - 0.5) * 0.02;
        this.colors[3 * slot] = e.color[0];
        this.colors[3 * slot + 1] = e.color[1];
        this.colors[3 * slot + 2] = e.color[2];
        this.life[slot] = e.life;
        this.maxLife[slot] = e.life;
      }
    }
    const geometry = this.points.geometry;
    const position = geometry.getAttribute("position") as THREE.BufferAttribute;
    for (let i = 0; i < this.life.length; i++) {
      if (this.life[i] <= 0) {
        // park dead particles far away instead of resizing buffers
        this.positions[3 * i + 2] = -1e6;
      }
    }
    position.needsUpdate = true;
    (geometry.getAttribute("color") as THREE.BufferAttribute).needsUpdate = true;
  }

  dispose(scene: THREE.Object3D): void {
    this.points.parent?.remove(this.points);
    this.points.geometry.dispose();
    (this.points.material as THREE.Material).dispose();
  }
}

// --- DOM helpers -------------------------------------------------------------

function showError(message: string): void {
  const el = document.getElementById("error-panel")!;
  el.textContent = `failed to load bundle: ${message}`;
  el.style.display = "block";
}

function buildMenuDom(
  manifest: BundleManifest,
  features: string[],
  colormaps: string[],
  dispatch: (event: ViewerEvent) => void,
): void {
  const featureSel = document.getElementById("feature-select") as HTMLSelectElement;
  featureSel.innerHTML = features.map((f) => `<option value="${f}">${f}</option>`).join("");
  featureSel.onchange = () => dispatch({ kind: "select-feature", name: featureSel.value });

  const cmapSel = document.getElementById("colormap-select") as HTMLSelectElement;
  cmapSel.innerHTML = colormaps.map((c) => `<option value="${c}">${c}</option>`).join("");
  cmapSel.onchange = () => dispatch({ kind: "set-colormap", name: cmapSel.value });

  const slider = document.getElementById("threshold-slider") as HTMLInputElement;
  slider.oninput = () =>
    dispatch({ kind: "set-threshold", q: Number(slider.value), phase: "dragging" });
  slider.onchange = () =>
    dispatch({ kind: "set-threshold", q: Number(slider.value), phase: "released" });

  const modeBtn = document.getElementById("mode-toggle") as HTMLButtonElement;
  modeBtn.onclick = () =>
    dispatch({
      kind: "set-mode",
      mode: modeBtn.dataset.mode === "spheres" ? "particles" : "spheres",
    });

  const back = document.getElementById("back-button") as HTMLButtonElement;
  back.onclick = () => dispatch({ kind: "exit-tumor" });

  const tumorList = document.getElementById("tumor-list")!;
  tumorList.innerHTML = manifest.tumors
    .map((t) => `<button data-tumor="${t.id}">tumor ${t.id}</button>`)
    .join(" ");
  tumorList.querySelectorAll("button").forEach((btn) => {
    btn.addEventListener("click", () => {
      const entry = manifest.tumors.find((t) => t.id === btn.dataset.tumor)!;
      dispatch({
        kind: "enter-tumor",
        tumorId: entry.id,
        sections: entry.sections.map((s) => s.section),
      });
    });
  });
}

function syncMenuDom(state: ViewerState, manifest: BundleManifest): void {
  (document.getElementById("threshold-slider") as HTMLInputElement).value = String(
    state.threshold,
  );
  (document.getElementById("threshold-value") as HTMLElement).textContent = `q = ${state.threshold}`;
  const featureSel = document.getElementById("feature-select") as HTMLSelectElement;
  if (state.featureName) featureSel.value = state.featureName;
  const cmapSel = document.getElementById("colormap-select") as HTMLSelectElement;
  cmapSel.value = state.colormap;
  const modeBtn = document.getElementById("mode-toggle") as HTMLButtonElement;
  modeBtn.dataset.mode = state.mode;
  modeBtn.textContent = state.mode === "spheres" ? "switch to particles" : "switch to spheres";
  (document.getElementById("back-button") as HTMLElement).style.display =
    state.level === "tumor" ? "inline-block" : "none";

  const sections = document.getElementById("section-toggles")!;
  if (state.level === "tumor") {
    const entry = manifest.tumors.find((t) => t.id === state.tumorId);
    sections.innerHTML = (entry?.sections ?? [])
      .map(
        (s) =>
          `<label><input type="checkbox" data-section="${s.section}" ${
            state.sectionVisibility[s.section] ?? true ? "checked" : ""
          }/> section ${s.section}</label>`,
      )
      .join("<br/>");
  } else {
    sections.innerHTML = "";
  }
}

function renderPanelDom(panel: PatchPanel): void {
  const el = document.getElementById("detail-panel")!;
  if (!panel.isOpen || !panel.content) {
    el.style.display = "none";
    return;
  }
  const c = panel.content;
  el.style.display = "block";
  el.innerHTML = `
    <button id="panel-close">close</button>
    <div>${c.featureName} [#${c.index}]${c.tumorId ? ` in tumor ${c.tumorId}` : ""}</div>
    <div>value ${c.value.toPrecision(6)} - normalized ${c.normalized.toFixed(4)}</div>
    ${
      panel.loadError
        ? `<div class="error">image failed</div><button id="panel-retry">retry</button>`
        : `<img src="${c.imageUrl}" class="zoomable" alt="patch ${c.index}"/>`
    }`;
  document.getElementById("panel-close")!.addEventListener("click", () => {
    panel.close();
    renderPanelDom(panel);
  });
  document.getElementById("panel-retry")?.addEventListener("click", () => {
    void panel.retry().then(() => renderPanelDom(panel));
  });
  el.querySelector("img.zoomable")?.addEventListener("wheel", (ev) => {
    const img = ev.currentTarget as HTMLImageElement;
    ev.preventDefault();
    const current = Number(img.dataset.zoom ?? "1");
    const next = Math.min(
      Math.max(current * ((ev as WheelEvent).deltaY < 0 ? 1.15 : 0.87), 0.5),
      8,
    );
    img.dataset.zoom = String(next);
    img.style.transform = `scale(${next})`;
  });
}

function drawColorbar(table: Uint8Array): void {
  const canvas = document.getElementById("colorbar") as HTMLCanvasElement | null;
  if (!canvas) return;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  for (let x = 0; x < canvas.width; x++) {
    const idx = Math.min(Math.floor((x / canvas.width) * 256), 255);
    ctx.fillStyle = `rgb(${table[3 * idx]},${table[3 * idx + 1]},${table[3 * idx + 2]})`;
    ctx.fillRect(x, 0, 1, canvas.height);
  }
}

void new ViewerApp().start();
