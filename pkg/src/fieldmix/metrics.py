"""Evaluation: FSC curves/AUC, per-image FSC, ARI, aligned pose errors,
resolution at the 0.5 cutoff, occupancy and confusion tables.

Ab initio reconstructions carry a global frame ambiguity. With this engine's
slicing convention (slice coords R^T k) the ambiguity right-multiplies the
predicted rotations, so alignment runs on the transposed rotation sets (the
transpose turns it into the left offset align_rotation_sets removes, and the
geodesic metric is transpose-invariant). A handedness flip maps to
conjugation by diag(1, 1, -1) and is searched as a second hypothesis.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import (
    Rotation,
    align_rotation_sets,
    aligned_rotation_errors_deg,
    quat_conjugate,
    quat_to_matrix,
)
from .transforms import RealVolume, idht3, trilinear_sample

Z_FLIP = np.diag([1.0, 1.0, -1.0])


# ---------------------------------------------------------------------------
# FSC
# ---------------------------------------------------------------------------

@dataclass
class FscCurve:
    freqs: np.ndarray   # cycles per length unit (uses the pixel size)
    values: np.ndarray
    pixel_size: float = 1.0


def fsc(a, b, pixel_size=None) -> FscCurve:
    """Fourier shell correlation on integer shells (DC shell included)."""
    arr_a = a.data if isinstance(a, RealVolume) else np.asarray(a)
    arr_b = b.data if isinstance(b, RealVolume) else np.asarray(b)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"volume shapes differ: {arr_a.shape} vs {arr_b.shape}")
    d = arr_a.shape[0]
    px = pixel_size or (a.pixel_size if isinstance(a, RealVolume) else 1.0)
    fa = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(arr_a)))
    fb = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(arr_b)))
    ax = np.arange(d) - d // 2
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    shells = np.round(np.sqrt(x * x + y * y + z * z)).astype(np.int64)
    freqs, vals = [], []
    for s in range(0, d // 2 + 1):
        m = shells == s
        if not np.any(m):
            continue
        num = float(np.real(np.sum(fa[m] * np.conj(fb[m]))))
        den = float(np.sqrt(np.sum(np.abs(fa[m]) ** 2) * np.sum(np.abs(fb[m]) ** 2)))
        if den == 0.0:
            continue
        freqs.append(s / (d * px))
        vals.append(num / den)
    return FscCurve(np.array(freqs), np.array(vals), px)


def fsc_auc(curve: FscCurve) -> float:
    """Mean correlation over the curve's shells (up to Nyquist)."""
    return float(np.mean(curve.values))


def resolution_at(curve: FscCurve, cutoff=0.5, pixel_size=None) -> float:
    """1 / (first crossing below cutoff), linearly interpolated, in length units.

    A curve that never drops below the cutoff reports the Nyquist limit.
    """
    px = pixel_size or curve.pixel_size
    vals = curve.values
    freqs = curve.freqs
    for i in range(1, len(vals)):
        if vals[i] < cutoff <= vals[i - 1]:
            frac = (vals[i - 1] - cutoff) / (vals[i - 1] - vals[i])
            f_cross = freqs[i - 1] + frac * (freqs[i] - freqs[i - 1])
            return float(1.0 / f_cross)
        if vals[i] < cutoff:
            return float(1.0 / freqs[i])
    return float(2.0 * px)  # Nyquist-limited


# ---------------------------------------------------------------------------
# ARI
# ---------------------------------------------------------------------------

def ari(labels_a, labels_b) -> float:
    """Hubert-Arabie adjusted Rand index from the contingency table."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length label vectors with n >= 2")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    n = len(a)
    expected = sum_a * sum_b / comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0  # both labelings constant
    return float((sum_ij - expected) / (max_index - expected))


def confusion_matrix(pred, gt, n_pred, n_gt):
    table = np.zeros((n_pred, n_gt), dtype=np.int64)
    np.add.at(table, (np.asarray(pred), np.asarray(gt)), 1)
    return table


def merge_by_majority(pred, gt, n_pred, n_gt):
    """Relabel each predicted class to the ground-truth class it mostly holds."""
    table = confusion_matrix(pred, gt, n_pred, n_gt)
    mapping = np.argmax(table, axis=1)
    return mapping[np.asarray(pred)]


# ---------------------------------------------------------------------------
# pose alignment and errors
# ---------------------------------------------------------------------------

@dataclass
class FrameAlignment:
    rotation: Rotation    # G from align_rotation_sets
    flipped: bool
    side: str = "right"   # "right": model-frame offset (transposed sets aligned)

    def volume_matrix(self) -> np.ndarray:
        """Matrix A with field_aligned(k) = field(A k) (improper when flipped).

        Only the physical "right" side corresponds to a rotated/mirrored
        reconstruction volume.
        """
        if self.side != "right":
            raise ValueError("volume alignment is defined for model-frame (right) offsets")
        g = self.rotation.matrix
        return (Z_FLIP @ g.T) if self.flipped else g.T

    def rotation_errors_deg(self, pred_quats, gt_quats):
        if self.side == "right":
            pred_quats = quat_conjugate(pred_quats)
            gt_quats = quat_conjugate(gt_quats)
        return aligned_rotation_errors_deg(
            np.asarray(pred_quats, dtype=np.float64),
            np.asarray(gt_quats, dtype=np.float64),
            self.rotation.quat,
            self.flipped,
        )


def align_view_frames(pred_quats, gt_quats) -> FrameAlignment:
    """Estimate the global frame offset between predicted and true rotations.

    The engine's reconstructions offset rotations on the right (a rotated
    volume), which transposition converts into the left offset that
    align_rotation_sets removes; a pure left offset (possible in synthetic
    constructions) is searched as a second hypothesis.
    """
    pred = np.asarray(pred_quats, dtype=np.float64)
    gt = np.asarray(gt_quats, dtype=np.float64)
    candidates = []
    for side in ("right", "left"):
        p = quat_conjugate(pred) if side == "right" else pred
        g_ = quat_conjugate(gt) if side == "right" else gt
        g, flipped = align_rotation_sets(list(p), list(g_))
        errs = aligned_rotation_errors_deg(p, g_, g.quat, flipped)
        candidates.append((float(np.median(errs)), side, FrameAlignment(g, flipped, side)))
    candidates.sort(key=lambda c: (round(c[0], 9), c[1] != "right"))
    return candidates[0][2]


def pose_errors(pred_quats, pred_trans, gt_quats, gt_trans, alignment=None):
    """(median rotation deg, median translation px, FrameAlignment).

    Translation errors are measured after removing the best least-squares
    global 3D shift of the model frame (a shift of the reconstructed volume
    adds its rotated in-plane component to every predicted translation).
    """
    pred_quats = np.asarray(pred_quats, dtype=np.float64)
    gt_quats = np.asarray(gt_quats, dtype=np.float64)
    if alignment is None:
        alignment = align_view_frames(pred_quats, gt_quats)
    rot_errs = alignment.rotation_errors_deg(pred_quats, gt_quats)

    delta = np.asarray(pred_trans, dtype=np.float64) - np.asarray(gt_trans, dtype=np.float64)
    mats = quat_to_matrix(pred_quats)
    rows = mats[:, :2, :].reshape(-1, 3)          # in-plane response to a 3D shift
    rhs = delta.reshape(-1)
    shift, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    resid = rhs - rows @ shift
    trans_errs = np.linalg.norm(resid.reshape(-1, 2), axis=1)
    return float(np.median(rot_errs)), float(np.median(trans_errs)), alignment, rot_errs, trans_errs


# ---------------------------------------------------------------------------
# volume decoding and per-image FSC
# ---------------------------------------------------------------------------

def decode_volume(source, d, align_matrix=None, pixel_size=1.0) -> RealVolume:
    """Evaluate a slice source on the full 3D lattice and invert to real space."""
    ax = np.arange(d) - d // 2
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    coords = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1).astype(np.float64) / d
    inside = np.linalg.norm(coords, axis=1) < 0.5
    if align_matrix is not None:
        coords = coords @ np.asarray(align_matrix).T
    vals = np.zeros(len(coords))
    vals[inside] = source.render(coords[inside])
    h3 = vals.reshape(d, d, d)
    return RealVolume(idht3(h3), pixel_size)


def resample_volume(vol, matrix) -> RealVolume:
    """out(x) = vol(W x), trilinear, zero outside; W may be improper."""
    arr = vol.data if isinstance(vol, RealVolume) else np.asarray(vol)
    px = vol.pixel_size if isinstance(vol, RealVolume) else 1.0
    d = arr.shape[0]
    ax = np.arange(d) - d // 2
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1).astype(np.float64)
    pts = pts @ np.asarray(matrix).T
    return RealVolume(trilinear_sample(arr, pts).reshape(d, d, d), px)


def per_image_fsc(
    decode_fn,
    pred_classes,
    gt_classes,
    gt_volume_fn,
    sample_per_class,
    align_matrix,
    pixel_size=1.0,
):
    """Per-image FSC AUC stats, grouped by true class.

    decode_fn(i) -> slice source for image i's predicted (class, conformation);
    gt_volume_fn(i) -> ground-truth RealVolume at image i's true (class, z).
    Samples the lowest-index `sample_per_class` images of each true class.
    """
    gt_classes = np.asarray(gt_classes)
    n_classes = int(gt_classes.max()) + 1
    per_class = {}
    curves = {}
    for c in range(n_classes):
        members = np.where(gt_classes == c)[0][:sample_per_class]
        aucs = []
        for i in members:
            vol_pred = decode_volume(decode_fn(int(i)), gt_volume_fn(int(i)).d, align_matrix, pixel_size)
            curve = fsc(vol_pred, gt_volume_fn(int(i)), pixel_size=pixel_size)
            aucs.append(fsc_auc(curve))
            curves[int(i)] = curve
        per_class[c] = (
            (float(np.mean(aucs)), float(np.std(aucs)), len(aucs)) if aucs else (float("nan"), float("nan"), 0)
        )
    return per_class, curves


@dataclass
class EvalReport:
    ari: float
    median_rotation_deg: float
    median_translation_px: float
    flipped: bool
    auc_per_class: dict
    auc_overall_mean: float
    auc_overall_std: float
    resolution_per_class: dict
    occupancy: np.ndarray
    confusion: np.ndarray

    def to_keyvalues(self) -> dict:
        out = {
            "ari": f"{self.ari:.6f}",
            "median_rotation_error_deg": f"{self.median_rotation_deg:.6f}",
            "median_translation_error_px": f"{self.median_translation_px:.6f}",
            "handedness_flipped": str(self.flipped).lower(),
            "per_image_fsc_auc_mean": f"{self.auc_overall_mean:.6f}",
            "per_image_fsc_auc_std": f"{self.auc_overall_std:.6f}",
        }
        for c, (mean, std, count) in sorted(self.auc_per_class.items()):
            out[f"class{c}_fsc_auc_mean"] = f"{mean:.6f}"
            out[f"class{c}_fsc_auc_std"] = f"{std:.6f}"
            out[f"class{c}_fsc_images"] = str(count)
        for c, res in sorted(self.resolution_per_class.items()):
            out[f"class{c}_resolution_at_0.5_A"] = f"{res:.4f}"
        out["occupancy"] = "/".join(str(int(v)) for v in self.occupancy)
        for r, row in enumerate(self.confusion):
            out[f"confusion_pred{r}"] = "/".join(str(int(v)) for v in row)
        return out
