"""Rotations, hierarchical SO(3) x R^2 search grids, and frame alignment.

Rotations are unit quaternions (w, x, y, z). The search grid over SO(3) is
built from the Hopf fibration: an equal-area grid on the 2-sphere (Healpix
cell centers, addressed by (face, ix, iy) at a given nside) crossed with a
uniform grid of in-plane angles. Each cell subdivides into 8 children
(4 sphere children x 2 in-plane children).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Healpix ring/longitude offsets per base face (Gorski et al. conventions).
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4])
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7])


# ---------------------------------------------------------------------------
# quaternion array helpers
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    """Hamilton product, (..., 4) x (..., 4) -> (..., 4)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    """(..., 4) unit quaternions -> (..., 3, 3) rotation matrices."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    m = np.empty(w.shape + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """(3, 3) rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def random_quats(rng, n):
    """n quaternions uniform on SO(3) (isotropic 4D Gaussians, normalized)."""
    q = rng.standard_normal((n, 4))
    return quat_normalize(q)


def quat_zflip_conjugate(q):
    """Conjugation by diag(1, 1, -1): R' = F R F in quaternion form."""
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, 1.0])


def quat_geodesic_deg(a, b):
    """Geodesic distance in degrees between quaternion arrays (broadcasting)."""
    dot = np.abs(np.sum(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64), axis=-1))
    dot = np.clip(dot, -1.0, 1.0)
    return np.degrees(2.0 * np.arccos(dot))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z); immutable."""

    w: float
    x: float
    y: float
    z: float

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_quat(q) -> "Rotation":
        q = quat_normalize(np.asarray(q, dtype=np.float64))
        return Rotation(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @staticmethod
    def from_matrix(m) -> "Rotation":
        return Rotation.from_quat(matrix_to_quat(m))

    @staticmethod
    def from_axis_angle(axis, angle_rad) -> "Rotation":
        return Rotation.from_quat(quat_from_axis_angle(axis, angle_rad))

    @property
    def quat(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def compose(self, other: "Rotation") -> "Rotation":
        """self followed-by composition: matrix(self) @ matrix(other)."""
        return Rotation.from_quat(quat_multiply(self.quat, other.quat))

    def inverse(self) -> "Rotation":
        return Rotation(self.w, -self.x, -self.y, -self.z)


@dataclass(frozen=True)
class Translation2D:
    tx: float
    ty: float

    def __post_init__(self):
        if not (math.isfinite(self.tx) and math.isfinite(self.ty)):
            raise ValueError("translation components must be finite")

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.tx, self.ty])


@dataclass(frozen=True)
class Pose:
    rotation: Rotation
    translation: Translation2D

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), Translation2D(0.0, 0.0))


def geodesic_distance(a: Rotation, b: Rotation) -> float:
    """arccos((trace(A^T B) - 1) / 2) in degrees, clamped into [0, 180]."""
    t = float(np.trace(a.matrix.T @ b.matrix))
    c = np.clip((t - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


# ---------------------------------------------------------------------------
# Healpix-style equal-area sphere grid, addressed by (face, ix, iy)
# ---------------------------------------------------------------------------

def s2_cell_centers(nside, f, ix, iy):
    """Centers (theta, phi) of Healpix cells (face f, coords ix, iy) at nside.

    ix runs along the north-east face axis and iy along the north-west one;
    subdividing a cell doubles nside and maps (ix, iy) -> (2ix+a, 2iy+b).
    """
    f = np.asarray(f, dtype=np.int64)
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    jr = _JRLL[f] * nside - ix - iy - 1

    nr = np.where(jr < nside, jr, np.where(jr > 3 * nside, 4 * nside - jr, nside))
    z_polar_n = 1.0 - (jr * jr) / (3.0 * nside * nside)
    z_polar_s = ((4 * nside - jr) * (4 * nside - jr)) / (3.0 * nside * nside) - 1.0
    z_eq = (2.0 * nside - jr) * 2.0 / (3.0 * nside)
    z = np.where(jr < nside, z_polar_n, np.where(jr > 3 * nside, z_polar_s, z_eq))

    kshift = np.where((jr >= nside) & (jr <= 3 * nside), (jr - nside) & 1, 0)
    jp = (_JPLL[f] * nr + ix - iy + 1 + kshift) // 2
    jp = np.where(jp > 4 * nr, jp - 4 * nr, jp)
    jp = np.where(jp < 1, jp + 4 * nr, jp)
    phi = (jp - (kshift + 1) * 0.5) * (np.pi / (2.0 * nr))

    theta = np.arccos(np.clip(z, -1.0, 1.0))
    return theta, phi


def hopf_to_quat(theta, phi, psi):
    """Hopf coordinates (sphere point theta/phi, circle angle psi) -> quaternion."""
    ct = np.cos(theta / 2)
    st = np.sin(theta / 2)
    quat = np.stack(
        [ct * np.cos(psi / 2), ct * np.sin(psi / 2), st * np.cos(phi + psi / 2), st * np.sin(phi + psi / 2)],
        axis=-1,
    )
    return quat


def _nside_for_points(s2_points: int) -> int:
    nside = int(round(math.sqrt(s2_points / 12.0)))
    if 12 * nside * nside != s2_points or nside < 1:
        raise ValueError(f"s2_points must be 12*nside^2 for integer nside, got {s2_points}")
    return nside


@dataclass(frozen=True)
class GridConfig:
    s2_points: int = 48
    inplane_points: int = 96
    trans_extent_px: float = 10.0
    trans_points_per_axis: int = 7


@dataclass(frozen=True)
class RotationNode:
    """One rotation cell in the hierarchy: sphere cell (f, ix, iy) + psi index."""

    level: int
    f: int
    ix: int
    iy: int
    psi: int


@dataclass
class PoseGrid:
    """Level-0 grid over SO(3) x R^2 plus the cell subdivision rules."""

    config: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        cfg = self.config
        self.nside0 = _nside_for_points(cfg.s2_points)
        self.n_psi0 = int(cfg.inplane_points)
        if self.n_psi0 < 1:
            raise ValueError("inplane_points must be >= 1")
        nside = self.nside0
        f, ix, iy = np.meshgrid(np.arange(12), np.arange(nside), np.arange(nside), indexing="ij")
        self.s2_f = f.ravel()
        self.s2_ix = ix.ravel()
        self.s2_iy = iy.ravel()
        theta, phi = s2_cell_centers(nside, self.s2_f, self.s2_ix, self.s2_iy)
        psi = (np.arange(self.n_psi0) + 0.5) * (2 * np.pi / self.n_psi0)
        n_s2 = len(theta)
        self.quats = hopf_to_quat(
            np.repeat(theta, self.n_psi0), np.repeat(phi, self.n_psi0), np.tile(psi, n_s2)
        )
        tvals = np.linspace(-cfg.trans_extent_px, cfg.trans_extent_px, cfg.trans_points_per_axis)
        ty, tx = np.meshgrid(tvals, tvals, indexing="ij")
        self.translations_xy = np.stack([tx.ravel(), ty.ravel()], axis=-1)
        self.trans_axis_values = tvals
        self.trans_step = tvals[1] - tvals[0] if len(tvals) > 1 else 0.0

    @property
    def n_rotations(self) -> int:
        return self.quats.shape[0]

    @property
    def n_translations(self) -> int:
        return self.translations_xy.shape[0]

    @property
    def rotations(self):
        return [Rotation.from_quat(q) for q in self.quats]

    @property
    def translations(self):
        return [Translation2D(float(t[0]), float(t[1])) for t in self.translations_xy]

    def rotation(self, index: int) -> Rotation:
        return Rotation.from_quat(self.quats[index])

    # -- hierarchical addressing ------------------------------------------

    def nside_at(self, level: int) -> int:
        return self.nside0 * (1 << level)

    def n_psi_at(self, level: int) -> int:
        return self.n_psi0 * (1 << level)

    def inplane_step(self, level: int) -> float:
        return 2 * np.pi / self.n_psi_at(level)

    def node_from_index(self, level: int, index: int) -> RotationNode:
        nside = self.nside_at(level)
        n_psi = self.n_psi_at(level)
        n_rot = 12 * nside * nside * n_psi
        if not 0 <= index < n_rot:
            raise IndexError(f"rotation index {index} out of range at level {level}")
        s2_lin, psi = divmod(index, n_psi)
        f, rem = divmod(s2_lin, nside * nside)
        ix, iy = divmod(rem, nside)
        return RotationNode(level, int(f), int(ix), int(iy), int(psi))

    def index_from_node(self, node: RotationNode) -> int:
        nside = self.nside_at(node.level)
        n_psi = self.n_psi_at(node.level)
        s2_lin = node.f * nside * nside + node.ix * nside + node.iy
        return s2_lin * n_psi + node.psi

    def node_quats(self, nodes) -> np.ndarray:
        level = nodes[0].level
        nside = self.nside_at(level)
        f = np.array([n.f for n in nodes])
        ix = np.array([n.ix for n in nodes])
        iy = np.array([n.iy for n in nodes])
        psi_idx = np.array([n.psi for n in nodes])
        theta, phi = s2_cell_centers(nside, f, ix, iy)
        psi = (psi_idx + 0.5) * self.inplane_step(level)
        return hopf_to_quat(theta, phi, psi)

    def children(self, node: RotationNode):
        """8 child nodes: 4 sphere children x 2 in-plane children."""
        out = []
        for a in (0, 1):
            for b in (0, 1):
                for c in (0, 1):
                    out.append(
                        RotationNode(
                            node.level + 1, node.f, 2 * node.ix + a, 2 * node.iy + b, 2 * node.psi + c
                        )
                    )
        return out

    def child_indices(self, level: int, index: int):
        node = self.node_from_index(level, index)
        return [self.index_from_node(c) for c in self.children(node)]


def build_base_grid(config: GridConfig | None = None) -> PoseGrid:
    """Base search grid: s2_points x inplane_points rotations, translation lattice."""
    return PoseGrid(config or GridConfig())


def subdivide(grid: PoseGrid, rotation_index: int, level: int):
    """The 8 child rotations of a rotation cell at `level` (indices valid there)."""
    node = grid.node_from_index(level, rotation_index)
    return [Rotation.from_quat(q) for q in grid.node_quats(grid.children(node))]


# ---------------------------------------------------------------------------
# 6-parameter rotation chart for gradient-based pose refinement
# ---------------------------------------------------------------------------

def rot6_from_matrix(m):
    """First two rows of R; the chart is re-orthonormalized on evaluation."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., 0, :], m[..., 1, :]], axis=-1)


def rot6_to_matrix(u):
    """Gram-Schmidt the two stored rows, complete with the cross product.

    u: (..., 6) -> R: (..., 3, 3) with rows (e1, e2, e1 x e2).
    """
    u = np.asarray(u, dtype=np.float64)
    a = u[..., :3]
    b = u[..., 3:]
    e1 = a / np.linalg.norm(a, axis=-1, keepdims=True)
    c = b - np.sum(e1 * b, axis=-1, keepdims=True) * e1
    e2 = c / np.linalg.norm(c, axis=-1, keepdims=True)
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=-2)


def rot6_backward(u, grad_e1, grad_e2):
    """Chain gradients w.r.t. the orthonormalized rows back onto the raw 6-vector."""
    u = np.asarray(u, dtype=np.float64)
    a = u[..., :3]
    b = u[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    e1 = a / na
    proj = np.sum(e1 * b, axis=-1, keepdims=True)
    c = b - proj * e1
    nc = np.linalg.norm(c, axis=-1, keepdims=True)
    e2 = c / nc

    gc = (grad_e2 - np.sum(e2 * grad_e2, axis=-1, keepdims=True) * e2) / nc
    gb = gc - np.sum(e1 * gc, axis=-1, keepdims=True) * e1
    ge1 = grad_e1 - np.sum(gc * e1, axis=-1, keepdims=True) * b - proj * gc
    ga = (ge1 - np.sum(e1 * ge1, axis=-1, keepdims=True) * e1) / na
    return np.concatenate([ga, gb], axis=-1)


# ---------------------------------------------------------------------------
# global frame alignment for evaluation
# ---------------------------------------------------------------------------

def _median_error_deg(g_quat, pred_quats, gt_quats):
    aligned = quat_multiply(g_quat[None, :], pred_quats)
    return float(np.median(quat_geodesic_deg(aligned, gt_quats)))


def _chordal_mean_quat(quats):
    """Principal eigenvector of the quaternion outer-product sum (sign-safe)."""
    m = np.einsum("ni,nj->ij", quats, quats)
    vals, vecs = np.linalg.eigh(m)
    return quat_normalize(vecs[:, -1])


def _refine_median(g_quat, pred_quats, gt_quats):
    best = _median_error_deg(g_quat, pred_quats, gt_quats)
    axes = np.eye(3)
    step = 8.0
    while step > 0.005:
        improved = False
        for axis in axes:
            for sign in (1.0, -1.0):
                delta = quat_from_axis_angle(axis, math.radians(sign * step))
                cand = quat_normalize(quat_multiply(delta, g_quat))
                err = _median_error_deg(cand, pred_quats, gt_quats)
                if err < best - 1e-12:
                    best, g_quat, improved = err, cand, True
        if not improved:
            step /= 2.0
    return g_quat, best


def align_rotation_sets(pred, gt):
    """Global rotation G (and handedness flag) minimizing median geodesic error.

    Searches both hypotheses: as-is, and with every predicted rotation
    conjugated by diag(1, 1, -1). G left-composes the (possibly flipped)
    predictions: error_i = geodesic(G * pred_i, gt_i).
    """
    if len(pred) == 0 or len(pred) != len(gt):
        raise ValueError("pred and gt must be equal-length, non-empty rotation lists")
    pred_quats = np.stack([p.quat if isinstance(p, Rotation) else np.asarray(p, dtype=np.float64) for p in pred])
    gt_quats = np.stack([g.quat if isinstance(g, Rotation) else np.asarray(g, dtype=np.float64) for g in gt])

    best = None
    for flipped in (False, True):
        p = quat_zflip_conjugate(pred_quats) if flipped else pred_quats
        rel = quat_multiply(gt_quats, quat_conjugate(p))
        g0 = _chordal_mean_quat(rel)
        g, err = _refine_median(g0, p, gt_quats)
        if best is None or err < best[2] - 1e-12:
            best = (g, flipped, err)
    g, flipped, _ = best
    return Rotation.from_quat(g), flipped


def aligned_rotation_errors_deg(pred_quats, gt_quats, g_quat, flipped):
    """Per-item geodesic errors (degrees) after applying an alignment result."""
    p = quat_zflip_conjugate(pred_quats) if flipped else np.asarray(pred_quats, dtype=np.float64)
    aligned = quat_multiply(np.asarray(g_quat, dtype=np.float64)[None, :], p)
    return quat_geodesic_deg(aligned, np.asarray(gt_quats, dtype=np.float64))
