"""Hierarchical pose search over the SO(3) x R^2 grid with frequency annealing.

The base scan scores every (rotation, translation) pair on the current
frequency band; the 8 best pairs are refined for 4 steps, each step replacing
a survivor by the best of its 8 rotation children crossed with a 3 x 3 local
translation neighborhood (steps halve per level). The returned pose is the
best candidate seen anywhere, re-scored exactly against the slice source.

Slices are rendered once per rotation and reused across all translations
(the observation, not the prediction, is phase-shifted). During training the
trainer hands in a gridded cache of the neural field so the 4608-rotation
scan costs gathers and one matmul instead of millions of MLP evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import render_banded
from .geometry import PoseGrid, Pose, Rotation, Translation2D, quat_to_matrix
from .transforms import band_mask_2d, freq_grid_2d, negated_frequency_view


@dataclass
class HpsSchedule:
    """Band cutoff rises linearly from k_min to k_max over the image budget."""

    k_min: float = 6.0
    k_max: float = 16.0
    image_budget: int = 1200

    def __post_init__(self):
        if not 0 < self.k_min <= self.k_max:
            raise ValueError("need 0 < k_min <= k_max")
        if self.image_budget < 1:
            raise ValueError("image budget must be positive")

    def k_cut(self, images_seen: int) -> float:
        frac = min(1.0, max(0.0, images_seen / self.image_budget))
        return self.k_min + (self.k_max - self.k_min) * frac

    def band_cut(self, images_seen: int) -> int:
        """Integer cutoff actually used for masks (quantized for table reuse)."""
        return int(np.floor(self.k_cut(images_seen) + 1e-9))


# ---------------------------------------------------------------------------
# slice sources
# ---------------------------------------------------------------------------

class FieldSliceSource:
    """Exact neural-field evaluation at arbitrary 3D frequency coordinates."""

    def __init__(self, weights, featurizer, z, dtype=np.float32):
        self.weights = weights
        self.featurizer = featurizer
        self.z = None if z is None else np.asarray(z)
        self.dtype = dtype

    def render(self, coords_xyz):
        z = None if self.z is None else self.z.astype(self.dtype)
        return render_banded(self.weights, self.featurizer, z, coords_xyz, dtype=self.dtype)


class GriddedSliceSource:
    """Trilinear interpolation of a centered Hartley cube.

    grid[z, y, x] covers fractional frequencies idx = k * lattice_d + c.
    """

    def __init__(self, grid, lattice_d=None, scale=1.0):
        self.grid = np.asarray(grid)
        self.lattice_d = lattice_d if lattice_d is not None else self.grid.shape[0]
        self.scale = scale

    def render(self, coords_xyz):
        from .transforms import trilinear_sample

        pts = np.asarray(coords_xyz, dtype=np.float64) * self.lattice_d
        return self.scale * trilinear_sample(self.grid, pts)


# ---------------------------------------------------------------------------
# per-band tables and per-(image, class) caches
# ---------------------------------------------------------------------------

class SliceTable:
    """Shared per-band machinery: mask, rotated base-scan coords, gather plan."""

    def __init__(self, grid: PoseGrid, d: int, k_cut: int):
        self.grid = grid
        self.d = d
        self.k_cut = int(k_cut)
        self.mask = band_mask_2d(d, self.k_cut)
        ky, kx = freq_grid_2d(d)
        self.lattice_xy = np.stack([kx[self.mask], ky[self.mask]], axis=-1).astype(np.float64)
        self.k_frac = (self.lattice_xy / d).astype(np.float32)
        self.n_banded = len(self.lattice_xy)
        self.cube_side = 2 * self.k_cut + 5
        self.rot_mats = quat_to_matrix(grid.quats).astype(np.float32)
        plane = np.concatenate(
            [self.lattice_xy / d, np.zeros((self.n_banded, 1))], axis=-1
        ).astype(np.float32)
        coords = np.einsum("mj,rjk->rmk", plane, self.rot_mats)  # (R, M, 3) of R^T k
        self._base_plan = self.gather_plan(coords.reshape(-1, 3))
        # translated-observation phase tables for the base translation lattice
        alpha = 2 * np.pi * (self.k_frac @ self.grid.translations_xy.T.astype(np.float32))
        self.trans_cos = np.cos(alpha).T.copy()  # (T, M), for shifting obs by -t
        self.trans_sin = np.sin(alpha).T.copy()

    def gather_plan(self, coords_xyz):
        """Precompute trilinear corner indices and the 8 corner weights."""
        l = self.cube_side
        c = l // 2
        pts = np.asarray(coords_xyz, dtype=np.float32) * self.d + c
        f = np.floor(pts).astype(np.int32)
        w = pts - f
        base = (f[:, 2] * l + f[:, 1]) * l + f[:, 0]
        wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
        weights = np.empty((8, len(base)), dtype=np.float32)
        offsets = np.empty(8, dtype=np.int32)
        i = 0
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    offsets[i] = (dz * l + dy) * l + dx
                    weights[i] = (
                        (wx if dx else 1 - wx) * (wy if dy else 1 - wy) * (wz if dz else 1 - wz)
                    )
                    i += 1
        return base, offsets, weights

    def gather(self, cache_flat, plan):
        base, offsets, weights = plan
        out = np.zeros(base.shape, dtype=cache_flat.dtype)
        tmp = np.empty_like(out)
        for i in range(8):
            np.take(cache_flat, base + offsets[i], out=tmp)
            tmp *= weights[i]
            out += tmp
        return out

    def base_scan_slices(self, cache_flat):
        """All 4608 rendered slices as an (R, M) array."""
        return self.gather(cache_flat, self._base_plan).reshape(
            self.grid.n_rotations, self.n_banded
        )

    def cache_lattice_coords(self):
        """Fractional coords of cube lattice points within the cache ball."""
        l = self.cube_side
        c = l // 2
        ax = np.arange(l) - c
        z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
        r2 = x * x + y * y + z * z
        ball = r2 <= (self.k_cut + 2) ** 2
        coords = np.stack([x[ball], y[ball], z[ball]], axis=-1).astype(np.float32) / self.d
        return coords, ball


def build_cache(source, table: SliceTable) -> np.ndarray:
    """Evaluate a slice source on the band-limited cube lattice (flat array)."""
    coords, ball = table.cache_lattice_coords()
    cube = np.zeros((table.cube_side,) * 3, dtype=np.float32)
    cube[ball] = source.render(coords).astype(np.float32)
    return cube.ravel()


@dataclass
class ObservationPack:
    """Banded H(+k)/H(-k) pairs of one observed image, ready to phase-shift."""

    h_pos: np.ndarray
    h_neg: np.ndarray
    ctf: np.ndarray

    @classmethod
    def from_hartley(cls, h_full, ctf_full, table: SliceTable):
        h_neg_full = negated_frequency_view(h_full)
        return cls(
            h_pos=h_full[table.mask].astype(np.float32),
            h_neg=h_neg_full[table.mask].astype(np.float32),
            ctf=ctf_full[table.mask].astype(np.float32),
        )

    def shifted(self, table, t):
        """Observation moved to the reference frame of translation t (shift by -t)."""
        alpha = 2 * np.pi * (table.k_frac @ np.asarray(t, dtype=np.float32))
        return np.cos(alpha) * self.h_pos - np.sin(alpha) * self.h_neg

    def shifted_base_lattice(self, table):
        """(T, M) observations shifted by minus each base-lattice translation."""
        return table.trans_cos * self.h_pos[None, :] - table.trans_sin * self.h_neg[None, :]


def score_pose(obs: ObservationPack, source, pose: Pose, table: SliceTable) -> float:
    """Banded squared error || shift(obs, -t) - ctf * render(R) ||^2 (f64 sum)."""
    plane = np.concatenate(
        [table.lattice_xy / table.d, np.zeros((table.n_banded, 1))], axis=-1
    )
    coords = plane @ pose.rotation.matrix
    pred = source.render(coords)
    o = obs.shifted(table, pose.translation.vec)
    diff = o.astype(np.float64) - obs.ctf.astype(np.float64) * np.asarray(pred, dtype=np.float64)
    return float(diff @ diff)


@dataclass
class PoseCandidate:
    node: object            # RotationNode lineage position
    quat: np.ndarray
    t: np.ndarray
    score: float


def _score_block(obs_shifted, ctf, slices):
    """scores[t, r] = || obs_t - ctf * slice_r ||^2 via the expanded form.

    f32 inputs, f64 accumulation of the quadratic terms.
    """
    cs = ctf[None, :] * slices
    u = np.einsum("rm,rm->r", cs, cs, dtype=np.float64)
    o2 = np.einsum("tm,tm->t", obs_shifted, obs_shifted, dtype=np.float64)
    cross = obs_shifted @ cs.T  # (T, R), f32 BLAS
    return o2[:, None] - 2.0 * cross.astype(np.float64) + u[None, :]


def hps(
    obs: ObservationPack,
    source,
    grid: PoseGrid,
    table: SliceTable,
    cache_flat=None,
    top=8,
    refine_steps=4,
):
    """Exhaustive base scan + top-k local refinement. Returns (Pose, score, stats).

    cache_flat: optional prebuilt gridded cache of `source` (built on demand).
    The returned score is score_pose re-evaluated exactly at the best pose.
    """
    if cache_flat is None:
        cache_flat = build_cache(source, table)
    stats = {"base_renders": 0, "refine_renders": 0, "exact_renders": 0}
    best_base_score = np.inf

    slices = table.base_scan_slices(cache_flat)
    stats["base_renders"] += grid.n_rotations
    obs_t = obs.shifted_base_lattice(table)
    scores = _score_block(obs_t, obs.ctf, slices)
    # keep the top rotations, each paired with its best lattice translation:
    # translation quantization inflates every score, so ranking raw (r, t)
    # pairs would fill the survivor set with copies of one rotation basin
    best_t_per_rot = np.argmin(scores, axis=0)
    per_rot = scores[best_t_per_rot, np.arange(scores.shape[1])]
    r_idx = np.argsort(per_rot, kind="stable")[:top]
    t_idx = best_t_per_rot[r_idx]

    survivors = []
    best = None
    for ti, ri in zip(t_idx, r_idx):
        cand = PoseCandidate(
            node=grid.node_from_index(0, int(ri)),
            quat=grid.quats[int(ri)].copy(),
            t=grid.translations_xy[int(ti)].copy(),
            score=float(scores[ti, ri]),
        )
        survivors.append(cand)
        if best is None or cand.score < best.score:
            best = cand
    best_base_score = best.score

    extent = grid.config.trans_extent_px
    plane = np.concatenate(
        [table.lattice_xy / table.d, np.zeros((table.n_banded, 1))], axis=-1
    ).astype(np.float32)
    for step in range(1, refine_steps + 1):
        t_step = grid.trans_step / (2**step)
        new_survivors = []
        child_nodes = [grid.children(c.node) for c in survivors]
        all_nodes = [n for kids in child_nodes for n in kids]
        child_quats = grid.node_quats(all_nodes)
        mats = quat_to_matrix(child_quats).astype(np.float32)
        coords = np.einsum("mj,rjk->rmk", plane, mats).reshape(-1, 3)
        rendered = table.gather(cache_flat, table.gather_plan(coords)).reshape(
            len(all_nodes), table.n_banded
        )
        stats["refine_renders"] += len(all_nodes)
        offsets = np.array(
            [(dx, dy) for dy in (-t_step, 0.0, t_step) for dx in (-t_step, 0.0, t_step)]
        )
        for s_i, cand in enumerate(survivors):
            kid_slices = rendered[8 * s_i : 8 * s_i + 8]
            ts = np.clip(cand.t[None, :] + offsets, -extent, extent)
            alpha = 2 * np.pi * (table.k_frac @ ts.T.astype(np.float32))
            obs_shift = (
                np.cos(alpha).T * obs.h_pos[None, :] - np.sin(alpha).T * obs.h_neg[None, :]
            )
            sc = _score_block(obs_shift, obs.ctf, kid_slices)
            ti, ri = np.unravel_index(int(np.argmin(sc)), sc.shape)
            new_cand = PoseCandidate(
                node=child_nodes[s_i][int(ri)],
                quat=child_quats[8 * s_i + int(ri)].copy(),
                t=ts[int(ti)].copy(),
                score=float(sc[ti, ri]),
            )
            new_survivors.append(new_cand)
            if new_cand.score < best.score:
                best = new_cand
        survivors = new_survivors

    pose = Pose(Rotation.from_quat(best.quat), Translation2D(float(best.t[0]), float(best.t[1])))
    exact = score_pose(obs, source, pose, table)
    stats["exact_renders"] += 1
    stats["best_base_score"] = best_base_score
    stats["best_score"] = best.score
    return pose, exact, stats


def hps_all_classes(obs: ObservationPack, sources, grid, table, caches=None, **kw):
    """Independent search per class; shares the observation phase tables."""
    out = []
    for k, source in enumerate(sources):
        cache = None if caches is None else caches[k]
        out.append(hps(obs, source, grid, table, cache_flat=cache, **kw))
    return out
