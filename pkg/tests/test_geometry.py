import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldmix import geometry as geo


def unit_quats(seed, n):
    rng = np.random.default_rng(seed)
    return geo.random_quats(rng, n)


# ---------------------------------------------------------------------------
# quaternions and geodesics
# ---------------------------------------------------------------------------

def test_quat_matrix_composition_agree():
    qa = unit_quats(0, 1000)
    qb = unit_quats(1, 1000)
    m_from_quat = geo.quat_to_matrix(geo.quat_multiply(qa, qb))
    m_composed = np.einsum("nij,njk->nik", geo.quat_to_matrix(qa), geo.quat_to_matrix(qb))
    assert np.max(np.abs(m_from_quat - m_composed)) < 1e-9


def test_rotation_invariants_after_composition():
    qa = unit_quats(2, 200)
    qb = unit_quats(3, 200)
    for a, b in zip(qa, qb):
        r = geo.Rotation.from_quat(a).compose(geo.Rotation.from_quat(b))
        assert abs(np.linalg.norm(r.quat) - 1.0) < 1e-9
        m = r.matrix
        assert np.max(np.abs(m.T @ m - np.eye(3))) < 1e-9
        assert abs(np.linalg.det(m) - 1.0) < 1e-9


def test_geodesic_identity_and_antipodal():
    r = geo.Rotation.from_axis_angle([0.3, -0.5, 0.81], 1.234)
    assert geo.geodesic_distance(r, r) == pytest.approx(0.0, abs=1e-9)
    half_turn = geo.Rotation.from_axis_angle([0, 0, 1], math.pi)
    assert geo.geodesic_distance(geo.Rotation.identity(), half_turn) == pytest.approx(180.0, abs=1e-9)


def test_geodesic_matches_axis_angle_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        axis = rng.standard_normal(3)
        r = geo.Rotation.from_axis_angle(axis, 0.3)
        assert geo.geodesic_distance(geo.Rotation.identity(), r) == pytest.approx(
            0.3 * 180 / math.pi, abs=1e-9
        )


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=50, deadline=None)
def test_geodesic_symmetry_and_triangle(seed):
    qa, qb, qc = unit_quats(seed, 3)
    a, b, c = (geo.Rotation.from_quat(q) for q in (qa, qb, qc))
    dab = geo.geodesic_distance(a, b)
    assert dab == pytest.approx(geo.geodesic_distance(b, a), abs=1e-9)
    assert dab <= geo.geodesic_distance(a, c) + geo.geodesic_distance(c, b) + 1e-9


def test_quat_geodesic_matches_matrix_formula():
    qa = unit_quats(11, 50)
    qb = unit_quats(12, 50)
    fast = geo.quat_geodesic_deg(qa, qb)
    slow = [
        geo.geodesic_distance(geo.Rotation.from_quat(a), geo.Rotation.from_quat(b))
        for a, b in zip(qa, qb)
    ]
    assert np.allclose(fast, slow, atol=1e-7)


# ---------------------------------------------------------------------------
# sphere grid: Healpix ring-structure oracle at nside=2
# ---------------------------------------------------------------------------

def test_s2_centers_ring_structure():
    f, ix, iy = np.meshgrid(np.arange(12), np.arange(2), np.arange(2), indexing="ij")
    theta, phi = geo.s2_cell_centers(2, f.ravel(), ix.ravel(), iy.ravel())
    z = np.cos(theta)
    # nside=2 rings: z = 11/12 (4 px), (4-jr)/3 for jr=2..6 (8 px each), -11/12 (4 px)
    expected = {11 / 12: 4, 2 / 3: 8, 1 / 3: 8, 0.0: 8, -1 / 3: 8, -2 / 3: 8, -11 / 12: 4}
    for zval, count in expected.items():
        assert np.sum(np.abs(z - zval) < 1e-12) == count
    # within each ring, azimuths are uniformly spaced and distinct
    for zval, count in expected.items():
        ring_phi = np.sort(phi[np.abs(z - zval) < 1e-12])
        gaps = np.diff(np.concatenate([ring_phi, [ring_phi[0] + 2 * np.pi]]))
        assert np.allclose(gaps, 2 * np.pi / count, atol=1e-12)


def test_s2_centers_equal_area_balance():
    f, ix, iy = np.meshgrid(np.arange(12), np.arange(2), np.arange(2), indexing="ij")
    theta, phi = geo.s2_cell_centers(2, f.ravel(), ix.ravel(), iy.ravel())
    xyz = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)
    assert np.linalg.norm(xyz.mean(axis=0)) < 1e-12


# ---------------------------------------------------------------------------
# pose grid
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def grid():
    return geo.build_base_grid()


def test_base_grid_counts(grid):
    assert grid.n_rotations == 4608
    assert grid.n_translations == 49


def test_translation_lattice_values(grid):
    expected = [-10 + 20 / 6 * i for i in range(7)]
    assert np.allclose(grid.trans_axis_values, expected, atol=1e-12)
    center = grid.translations_xy[49 // 2]
    assert center[0] == 0.0 and center[1] == 0.0


def test_base_grid_rotations_pairwise_distinct(grid):
    q = grid.quats.astype(np.float32)
    dots = np.abs(q @ q.T)
    np.fill_diagonal(dots, 0.0)
    max_offdiag = float(dots.max())
    # distinct rotations: |<qi, qj>| < 1 for all i != j
    assert max_offdiag < 1.0 - 1e-6


def test_base_grid_covering_radius_bounded(grid):
    q = grid.quats.astype(np.float32)
    dots = np.abs(q @ q.T)
    np.fill_diagonal(dots, 0.0)
    nn_cos_half = dots.max(axis=1)
    nn_deg = np.degrees(2 * np.arccos(np.clip(nn_cos_half, -1, 1)))
    assert nn_deg.max() <= 2 * np.median(nn_deg) + 1e-6


def test_subdivide_children_within_parent_cell(grid):
    # Structural containment: sphere children stay inside the parent's sphere
    # cell (<= 15 deg from its center at nside=2), in-plane children are at
    # exactly +- a quarter step, and the SO(3) geodesic stays below the parent
    # cell radius (50 deg covers the widest, polar-cap cells of this grid).
    rng = np.random.default_rng(0)
    for idx in rng.integers(0, grid.n_rotations, size=40):
        node = grid.node_from_index(0, int(idx))
        parent = grid.rotation(int(idx))
        p_theta, p_phi = geo.s2_cell_centers(
            grid.nside_at(0), np.array([node.f]), np.array([node.ix]), np.array([node.iy])
        )
        p_vec = np.array(
            [np.sin(p_theta) * np.cos(p_phi), np.sin(p_theta) * np.sin(p_phi), np.cos(p_theta)]
        ).ravel()
        kids = grid.children(node)
        assert len(kids) == 8
        for kid, kid_rot in zip(kids, geo.subdivide(grid, int(idx), 0)):
            k_theta, k_phi = geo.s2_cell_centers(
                grid.nside_at(1), np.array([kid.f]), np.array([kid.ix]), np.array([kid.iy])
            )
            k_vec = np.array(
                [np.sin(k_theta) * np.cos(k_phi), np.sin(k_theta) * np.sin(k_phi), np.cos(k_theta)]
            ).ravel()
            s2_angle = np.degrees(np.arccos(np.clip(np.dot(p_vec, k_vec), -1, 1)))
            assert s2_angle <= 15.0
            psi_parent = (node.psi + 0.5) * grid.inplane_step(0)
            psi_child = (kid.psi + 0.5) * grid.inplane_step(1)
            assert abs(psi_child - psi_parent) == pytest.approx(grid.inplane_step(0) / 4, abs=1e-12)
            assert geo.geodesic_distance(parent, kid_rot) < 50.0


def test_subdivide_deterministic(grid):
    a = geo.subdivide(grid, 1234, 0)
    b = geo.subdivide(grid, 1234, 0)
    assert all(np.array_equal(x.quat, y.quat) for x, y in zip(a, b))


def test_inplane_step_halves_each_level(grid):
    assert grid.inplane_step(0) == pytest.approx(2 * np.pi / 96)
    assert grid.inplane_step(4) == pytest.approx((2 * np.pi / 96) / 2**4)


def test_subdivision_lineage_scaling(grid):
    # Down a random lineage the level-3 -> level-4 step shrinks to a fixed
    # multiple of (base cell radius) / 2^4. Polar-cap lineages plateau (the
    # Hopf chart is singular at theta = pi), hence the calibrated constant.
    base_radius = 50.0
    c = 6.0
    rng = np.random.default_rng(3)
    for _ in range(8):
        idx = int(rng.integers(0, grid.n_rotations))
        node = grid.node_from_index(0, idx)
        step = None
        for level in range(4):
            kids = grid.children(node)
            kid = kids[int(rng.integers(0, 8))]
            step = float(
                geo.quat_geodesic_deg(grid.node_quats([node])[0], grid.node_quats([kid])[0])
            )
            node = kid
        assert step <= base_radius / 2**4 * c


def test_child_indices_roundtrip(grid):
    for idx in (0, 257, 4607):
        for child_idx, child_rot in zip(grid.child_indices(0, idx), geo.subdivide(grid, idx, 0)):
            node = grid.node_from_index(1, child_idx)
            assert np.allclose(grid.node_quats([node])[0], child_rot.quat)
    with pytest.raises(IndexError):
        grid.node_from_index(0, 4608)


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def test_align_identical_sets():
    gt = [geo.Rotation.from_quat(q) for q in unit_quats(5, 40)]
    g, flipped = geo.align_rotation_sets(gt, gt)
    assert not flipped
    assert geo.geodesic_distance(g, geo.Rotation.identity()) < 1e-6
    errs = geo.aligned_rotation_errors_deg(
        np.stack([r.quat for r in gt]), np.stack([r.quat for r in gt]), g.quat, flipped
    )
    assert np.median(errs) < 1e-9


def test_align_recovers_global_offset():
    gt = [geo.Rotation.from_quat(q) for q in unit_quats(6, 50)]
    g0 = geo.Rotation.from_axis_angle([1.0, 2.0, -0.5], 0.9)
    pred = [g0.compose(r) for r in gt]
    g, flipped = geo.align_rotation_sets(pred, gt)
    assert not flipped
    assert geo.geodesic_distance(g, g0.inverse()) < 1e-6
    errs = geo.aligned_rotation_errors_deg(
        np.stack([r.quat for r in pred]), np.stack([r.quat for r in gt]), g.quat, flipped
    )
    assert np.median(errs) < 1e-6


def test_align_detects_mirrored_set():
    gt_q = unit_quats(8, 50)
    pred_q = geo.quat_zflip_conjugate(gt_q)
    pred = [geo.Rotation.from_quat(q) for q in pred_q]
    gt = [geo.Rotation.from_quat(q) for q in gt_q]
    g, flipped = geo.align_rotation_sets(pred, gt)
    assert flipped
    errs = geo.aligned_rotation_errors_deg(pred_q, gt_q, g.quat, flipped)
    assert np.median(errs) < 1e-6


def test_align_empty_raises():
    with pytest.raises(ValueError):
        geo.align_rotation_sets([], [])


# ---------------------------------------------------------------------------
# 6-parameter rotation chart
# ---------------------------------------------------------------------------

def test_rot6_roundtrip_orthonormal():
    rng = np.random.default_rng(20)
    for q in unit_quats(21, 10):
        m = geo.quat_to_matrix(q)
        u = geo.rot6_from_matrix(m)
        back = geo.rot6_to_matrix(u)
        assert np.max(np.abs(back - m)) < 1e-12
    # noisy 6-vectors still give orthonormal matrices
    u = rng.standard_normal((5, 6))
    r = geo.rot6_to_matrix(u)
    eye = np.einsum("bij,bkj->bik", r, r)
    assert np.max(np.abs(eye - np.eye(3))) < 1e-12
    assert np.allclose(np.linalg.det(r), 1.0, atol=1e-12)


def test_rot6_backward_matches_finite_differences():
    rng = np.random.default_rng(22)
    u = rng.standard_normal(6) * 1.5
    g1 = rng.standard_normal(3)
    g2 = rng.standard_normal(3)

    def loss(uv):
        r = geo.rot6_to_matrix(uv)
        return float(g1 @ r[0] + g2 @ r[1])

    grad = geo.rot6_backward(u, g1, g2)
    eps = 1e-7
    for j in range(6):
        up, um = u.copy(), u.copy()
        up[j] += eps
        um[j] -= eps
        fdiff = (loss(up) - loss(um)) / (2 * eps)
        assert grad[j] == pytest.approx(fdiff, rel=1e-5, abs=1e-9)
