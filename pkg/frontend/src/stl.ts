import * as THREE from "three";

/** Parse a binary STL (80-byte header, uint32 count, 50-byte triangles). */
export function parseBinaryStl(buffer: ArrayBuffer): THREE.BufferGeometry {
  const view = new DataView(buffer);
  if (buffer.byteLength < 84) throw new Error("not a binary STL: too short");
  const count = view.getUint32(80, true);
  if (buffer.byteLength < 84 + count * 50) {
    throw new Error(`binary STL truncated: ${count} triangles declared`);
  }
  const positions = new Float32Array(count * 9);
  const normals = new Float32Array(count * 9);
  for (let i = 0; i < count; i++) {
    const base = 84 + i * 50;
    const nx = view.getFloat32(base, true);
    const ny = view.getFloat32(base + 4, true);
    const nz = view.getFloat32(base + 8, true);
    for (let v = 0; v < 3; v++) {
      const off = base + 12 + v * 12;
      const k = i * 9 + v * 3;
      positions[k] = view.getFloat32(off, true);
      positions[k + 1] = view.getFloat32(off + 4, true);
      positions[k + 2] = view.getFloat32(off + 8, true);
      normals[k] = nx;
      normals[k + 1] = ny;
      normals[k + 2] = nz;
    }
  }
  const geometry = new THREE.BufferGeometry();
  geometry.setAttribute("position", new THREE.BufferAttribute(positions, 3));
  geometry.setAttribute("normal", new THREE.BufferAttribute(normals, 3));
  return geometry;
}
