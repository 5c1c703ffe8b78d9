"""Triangular spring lattices and their relaxation to equilibrium.

Each section owns one SpringMesh: a hexagonally offset triangular lattice of
vertices joined by Hookean springs. Block matching adds cross springs between
meshes of adjacent sections; `relax` then drives the whole multi-mesh system
to equilibrium with an overdamped explicit (Jacobi) iteration that is exact
gradient descent on the total spring energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SpringMesh",
    "CrossSpring",
    "RelaxDivergence",
    "build_triangular_mesh",
    "relax",
    "system_energy",
]

ROW_STEP_FACTOR = np.sqrt(3.0) / 2.0  # hex lattice row spacing in pitch units


class RelaxDivergence(RuntimeError):
    """Total energy grew for 10 consecutive iterations: step_size too large."""


@dataclass
class SpringMesh:
    """Spring lattice for one section.

    rest: (n, 2) rest positions (x, y). current: (n, 2) deformed positions.
    fixed: (n,) bool, anchored vertices. springs: (m, 2) int vertex pairs with
    per-spring rest_length and stiffness. triangles: (t, 3) int, consistent
    ordering, covering the lattice hull.
    """

    rest: np.ndarray
    current: np.ndarray
    fixed: np.ndarray
    springs: np.ndarray
    rest_length: np.ndarray
    stiffness: np.ndarray
    triangles: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.rest)

    def displacement(self) -> np.ndarray:
        return self.current - self.rest

    def neighbor_lists(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for a, b in self.springs:
            out[a].append(int(b))
            out[b].append(int(a))
        return out

    def energy(self) -> float:
        d = self.current[self.springs[:, 1]] - self.current[self.springs[:, 0]]
        length = np.linalg.norm(d, axis=1)
        return float(0.5 * np.sum(self.stiffness * (length - self.rest_length) ** 2))


@dataclass
class CrossSpring:
    """Zero-rest-length spring tying a vertex of one mesh to a point bound to
    a neighbor mesh.

    The handle sits at fixed barycentric coordinates of a rest-space triangle
    of the target mesh, so it rides along as that mesh deforms; reaction
    forces are distributed back onto the triangle's vertices by weight.
    """

    source_mesh: int
    source_vertex: int
    target_mesh: int
    target_triangle: np.ndarray  # (3,) vertex indices in the target mesh
    weights: np.ndarray  # (3,) barycentric weights, sum 1
    stiffness: float


def build_triangular_mesh(
    width: float, height: float, pitch: float, stiffness: float = 1.0
) -> SpringMesh:
    """Hexagonally offset triangular lattice spanning [0,width] x [0,height].

    Rows are uniformly spaced to land exactly on 0 and height; interior
    vertices of odd rows are shifted half a cell so triangles come out
    equilateral-ish. First/last vertex of every row is pinned to 0 and width,
    keeping the lattice hull equal to the full bounding box.
    """
    if pitch <= 0:
        raise ValueError(f"pitch must be > 0, got {pitch}")
    if width < pitch or height < pitch:
        raise ValueError(f"lattice {width}x{height} smaller than pitch {pitch}")

    n_cols = max(2, round(width / pitch) + 1)
    n_rows = max(2, round(height / (pitch * ROW_STEP_FACTOR)) + 1)
    dx = width / (n_cols - 1)
    ys = np.linspace(0.0, height, n_rows)

    rows: list[np.ndarray] = []
    verts: list[tuple[float, float]] = []
    for r in range(n_rows):
        xs = np.arange(n_cols) * dx
        if r % 2 == 1 and n_cols > 2:
            xs[1:-1] += dx / 2.0
        xs[0], xs[-1] = 0.0, width
        idx = np.arange(len(verts), len(verts) + len(xs))
        rows.append(idx)
        verts.extend((float(x), float(ys[r])) for x in xs)
    rest = np.asarray(verts, dtype=np.float64)

    triangles: list[tuple[int, int, int]] = []
    for r in range(n_rows - 1):
        a_idx, b_idx = rows[r], rows[r + 1]
        ax, bx = rest[a_idx, 0], rest[b_idx, 0]
        i = j = 0
        # strip triangulation between two x-sorted rows sharing endpoints
        while i < len(a_idx) - 1 or j < len(b_idx) - 1:
            can_a = i < len(a_idx) - 1
            can_b = j < len(b_idx) - 1
            if can_a and (not can_b or ax[i + 1] <= bx[j + 1]):
                triangles.append((a_idx[i], a_idx[i + 1], b_idx[j]))
                i += 1
            else:
                triangles.append((a_idx[i], b_idx[j + 1], b_idx[j]))
                j += 1
    tri = np.asarray(triangles, dtype=np.intp)

    # enforce positive signed area (counterclockwise in x-right/y-down coords)
    p0, p1, p2 = rest[tri[:, 0]], rest[tri[:, 1]], rest[tri[:, 2]]
    area2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (
        p1[:, 1] - p0[:, 1]
    ) * (p2[:, 0] - p0[:, 0])
    flip = area2 < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]

    edges = set()
    for a, b, c in tri:
        for u, v in ((a, b), (b, c), (c, a)):
            edges.add((min(u, v), max(u, v)))
    springs = np.asarray(sorted(edges), dtype=np.intp)
    rest_length = np.linalg.norm(rest[springs[:, 1]] - rest[springs[:, 0]], axis=1)
    if np.any(rest_length <= 0):
        raise ValueError("degenerate lattice: zero-length spring")

    return SpringMesh(
        rest=rest,
        current=rest.copy(),
        fixed=np.zeros(len(rest), dtype=bool),
        springs=springs,
        rest_length=rest_length,
        stiffness=np.full(len(springs), float(stiffness)),
        triangles=tri,
    )


@dataclass
class _FlatSystem:
    """All meshes stacked into flat arrays for vectorized force evaluation."""

    pos: np.ndarray
    fixed: np.ndarray
    offsets: np.ndarray
    sa: np.ndarray
    sb: np.ndarray
    s_rest: np.ndarray
    s_k: np.ndarray
    incidence: "sparse.csr_matrix"  # (n_vertices, n_springs), +/-1 entries
    gap_op: "sparse.csr_matrix"  # (n_cross, n_vertices): handle - source
    c_k: np.ndarray


def _flatten(meshes: list[SpringMesh], cross: list[CrossSpring]) -> _FlatSystem:
    from scipy import sparse

    offsets = np.cumsum([0] + [m.n_vertices for m in meshes])
    n = int(offsets[-1])
    pos = np.concatenate([m.current for m in meshes], axis=0)
    fixed = np.concatenate([m.fixed for m in meshes], axis=0)
    sa = np.concatenate([m.springs[:, 0] + offsets[i] for i, m in enumerate(meshes)])
    sb = np.concatenate([m.springs[:, 1] + offsets[i] for i, m in enumerate(meshes)])
    s_rest = np.concatenate([m.rest_length for m in meshes])
    s_k = np.concatenate([m.stiffness for m in meshes])

    m_springs = len(sa)
    rows = np.concatenate([sa, sb])
    cols = np.concatenate([np.arange(m_springs)] * 2)
    vals = np.concatenate([np.ones(m_springs), -np.ones(m_springs)])
    incidence = sparse.csr_matrix((vals, (rows, cols)), shape=(n, m_springs))

    c = len(cross)
    if c:
        # gap_op @ pos = handle position - source position, per cross spring
        rows = np.repeat(np.arange(c), 4)
        cols = np.empty(4 * c, dtype=np.intp)
        vals = np.empty(4 * c)
        for j, cs in enumerate(cross):
            tri = np.asarray(cs.target_triangle) + offsets[cs.target_mesh]
            cols[4 * j : 4 * j + 3] = tri
            vals[4 * j : 4 * j + 3] = cs.weights
            cols[4 * j + 3] = cs.source_vertex + offsets[cs.source_mesh]
            vals[4 * j + 3] = -1.0
        gap_op = sparse.csr_matrix((vals, (rows, cols)), shape=(c, n))
        c_k = np.asarray([cs.stiffness for cs in cross], dtype=np.float64)
    else:
        gap_op = sparse.csr_matrix((0, n))
        c_k = np.zeros(0)
    return _FlatSystem(pos, fixed, offsets, sa, sb, s_rest, s_k, incidence, gap_op, c_k)


def _forces_and_energy(s: _FlatSystem) -> tuple[np.ndarray, float]:
    d = s.pos[s.sb] - s.pos[s.sa]
    length = np.linalg.norm(d, axis=1)
    safe = np.where(length > 0, length, 1.0)
    scale = s.s_k * (length - s.s_rest) / safe
    scale[length == 0] = 0.0
    force = s.incidence @ (scale[:, None] * d)
    energy = 0.5 * np.sum(s.s_k * (length - s.s_rest) ** 2)

    if s.gap_op.shape[0]:
        gap = s.gap_op @ s.pos
        fc = s.c_k[:, None] * gap  # rest length 0: force is linear in the gap
        force -= s.gap_op.T @ fc
        energy += 0.5 * np.sum(s.c_k * np.sum(gap * gap, axis=1))

    force[s.fixed] = 0.0
    return force, float(energy)


def system_energy(meshes: list[SpringMesh], cross: list[CrossSpring]) -> float:
    _, e = _forces_and_energy(_flatten(meshes, cross))
    return e


def relax(
    meshes: list[SpringMesh],
    cross: list[CrossSpring],
    step_size: float = 0.1,
    max_iters: int = 5000,
    converge_eps: float = 0.05,
) -> list[float]:
    """Drive the spring system to equilibrium; returns the total-energy trace.

    Each iteration moves every free vertex by step_size times its net spring
    force, all forces evaluated on the previous iterate. Stops when the
    largest per-vertex move falls below converge_eps; raises RelaxDivergence
    after 10 consecutive energy increases. Writes relaxed positions back into
    the meshes.
    """
    sys = _flatten(meshes, cross)
    trace: list[float] = []
    grow_run = 0
    for _ in range(max_iters):
        force, energy = _forces_and_energy(sys)
        if trace and energy > trace[-1]:
            grow_run += 1
            if grow_run >= 10:
                raise RelaxDivergence(
                    f"energy grew for {grow_run} consecutive iterations "
                    f"({trace[-1]:.6g} -> {energy:.6g}); reduce step_size "
                    f"(currently {step_size})"
                )
        else:
            grow_run = 0
        trace.append(energy)

        move = step_size * force
        max_disp = float(np.max(np.linalg.norm(move, axis=1))) if len(move) else 0.0
        if max_disp < converge_eps:
            break
        sys.pos += move

    for i, m in enumerate(meshes):
        m.current = sys.pos[sys.offsets[i] : sys.offsets[i + 1]].copy()
    return trace
