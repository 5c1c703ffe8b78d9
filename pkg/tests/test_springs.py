import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histo3d.springs import (
    CrossSpring,
    RelaxDivergence,
    SpringMesh,
    build_triangular_mesh,
    relax,
)


def spring_lengths(mesh):
    d = mesh.current[mesh.springs[:, 1]] - mesh.current[mesh.springs[:, 0]]
    return np.linalg.norm(d, axis=1)


class TestBuildTriangularMesh:
    def test_minimal_lattice_is_two_by_two(self):
        m = build_triangular_mesh(50, 50, 50)
        assert m.n_vertices == 4
        assert len(m.triangles) == 2
        assert np.allclose(spring_lengths(m), m.rest_length)

    def test_initial_energy_zero(self):
        m = build_triangular_mesh(100, 100, 50)
        assert np.allclose(spring_lengths(m), m.rest_length)
        assert m.energy() == 0.0

    def test_vertex_count_matches_enumeration(self):
        # 300x200 at pitch 50: documented construction has
        # max(2, round(300/50)+1) = 7 columns per row and
        # max(2, round(200/(50*sqrt(3)/2))+1) = 6 rows
        m = build_triangular_mesh(300, 200, 50)
        rows = max(2, round(200 / (50 * np.sqrt(3) / 2)) + 1)
        cols = max(2, round(300 / 50) + 1)
        assert m.n_vertices == rows * cols

    def test_lattice_covers_bounding_box(self):
        m = build_triangular_mesh(300, 200, 50)
        assert m.rest[:, 0].min() == 0 and m.rest[:, 0].max() == 300
        assert m.rest[:, 1].min() == 0 and m.rest[:, 1].max() == 200

    def test_graph_is_connected(self):
        m = build_triangular_mesh(300, 200, 64)
        seen = {0}
        frontier = [0]
        adj = m.neighbor_lists()
        while frontier:
            v = frontier.pop()
            for n in adj[v]:
                if n not in seen:
                    seen.add(n)
                    frontier.append(n)
        assert len(seen) == m.n_vertices

    def test_rejects_nonpositive_pitch(self):
        with pytest.raises(ValueError):
            build_triangular_mesh(100, 100, 0)

    def test_positive_triangle_areas(self):
        m = build_triangular_mesh(300, 200, 50)
        p0 = m.rest[m.triangles[:, 0]]
        p1 = m.rest[m.triangles[:, 1]]
        p2 = m.rest[m.triangles[:, 2]]
        area2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (
            p1[:, 1] - p0[:, 1]
        ) * (p2[:, 0] - p0[:, 0])
        assert (area2 > 0).all()


def one_spring_system(stretch=1.1, k=1.0):
    rest = np.array([[0.0, 0.0], [100.0, 0.0]])
    mesh = SpringMesh(
        rest=rest,
        current=np.array([[0.0, 0.0], [100.0 * stretch, 0.0]]),
        fixed=np.array([True, False]),
        springs=np.array([[0, 1]]),
        rest_length=np.array([100.0]),
        stiffness=np.array([k]),
        triangles=np.array([[0, 1, 1]]),
    )
    return mesh


def handle_host(x, y):
    """Fully fixed helper mesh hosting cross-spring handles."""
    rest = np.array([[x, y], [x + 1.0, y], [x, y + 1.0]])
    return SpringMesh(
        rest=rest,
        current=rest.copy(),
        fixed=np.ones(3, dtype=bool),
        springs=np.array([[0, 1]]),
        rest_length=np.array([1.0]),
        stiffness=np.array([1e-6]),
        triangles=np.array([[0, 1, 2]]),
    )


class TestRelax:
    def test_no_cross_springs_means_no_movement(self):
        m = build_triangular_mesh(200, 150, 50)
        before = m.current.copy()
        trace = relax([m], [])
        assert np.array_equal(m.current, before)
        assert trace == [0.0]

    def test_single_stretched_spring_returns_to_rest(self):
        m = one_spring_system(stretch=1.1)
        e0 = m.energy()
        trace = relax([m], [], step_size=0.2, converge_eps=1e-6, max_iters=10000)
        assert abs(np.linalg.norm(m.current[1] - m.current[0]) - 100.0) < 1e-4
        assert trace[-1] < e0

    def test_two_spring_equilibrium_closed_form(self):
        # k1 x = k2 (t - x)  =>  x = k2 t / (k1 + k2)
        k1, k2, t = 1.0, 0.1, 10.0
        mesh = one_spring_system(stretch=1.0, k=k1)
        host = handle_host(100.0 + t, 0.0)
        cross = [
            CrossSpring(
                source_mesh=0,
                source_vertex=1,
                target_mesh=1,
                target_triangle=np.array([0, 1, 2]),
                weights=np.array([1.0, 0.0, 0.0]),
                stiffness=k2,
            )
        ]
        relax([mesh, host], cross, step_size=0.2, converge_eps=1e-8, max_iters=50000)
        x = mesh.current[1, 0] - 100.0
        assert x == pytest.approx(k2 * t / (k1 + k2), abs=1e-4)

    def test_energy_trace_non_increasing(self):
        mesh = one_spring_system(stretch=1.3)
        host = handle_host(120.0, 30.0)
        cross = [
            CrossSpring(0, 1, 1, np.array([0, 1, 2]), np.array([1.0, 0, 0]), 0.5)
        ]
        trace = relax([mesh, host], cross, step_size=0.1, converge_eps=1e-7, max_iters=20000)
        for a, b in zip(trace, trace[1:]):
            assert b <= a * (1 + 1e-9)

    def test_divergence_raises_with_advice(self):
        mesh = one_spring_system(stretch=1.5)
        with pytest.raises(RelaxDivergence, match="step_size"):
            relax([mesh], [], step_size=10.0, max_iters=500, converge_eps=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_random_systems_relax_monotonically(self, seed):
        rng = np.random.default_rng(seed)
        m = build_triangular_mesh(160, 120, 40)
        m.stiffness = rng.uniform(0.1, 1.0, len(m.springs))
        m.current = m.rest + rng.uniform(-6, 6, m.rest.shape)
        m.fixed[0] = True
        trace = relax([m], [], step_size=0.1, converge_eps=1e-4, max_iters=3000)
        for a, b in zip(trace, trace[1:]):
            assert b <= a * (1 + 1e-9)
