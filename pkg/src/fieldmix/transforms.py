"""Hartley transforms, slice coordinates, translation, projection, backprojection.

Conventions used throughout:
  * images/volumes are square/cubic with even side D (a power of two);
  * the real-space origin sits at pixel index D//2 on every axis;
  * Hartley/Fourier arrays live on the centered frequency lattice, index a
    along an axis meaning integer frequency a - D//2;
  * fractional frequencies k = k_int / D lie in [-0.5, 0.5), the coordinate
    system the neural field and slice sampling use;
  * all transforms use the symmetric 1/sqrt(D^n) normalization, making the
    Hartley transform an involution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, Rotation


def _check_square(a, ndim):
    a = np.asarray(a)
    if a.ndim != ndim or len(set(a.shape)) != 1:
        raise ValueError(f"expected {ndim}d array with equal sides, got shape {a.shape}")
    d = a.shape[0]
    if d % 2 != 0 or d < 2:
        raise ValueError(f"side must be even, got {d}")
    return a, d


@dataclass
class RealImage:
    """D x D real image; origin at pixel (D//2, D//2)."""

    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        self.data, self.d = _check_square(self.data, 2)


@dataclass
class HartleyImage:
    """D x D real Hartley coefficients on the centered frequency lattice."""

    data: np.ndarray

    def __post_init__(self):
        self.data, self.d = _check_square(self.data, 2)


@dataclass
class RealVolume:
    """D x D x D real volume, z-major (data[z, y, x]); origin at D//2."""

    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        self.data, self.d = _check_square(self.data, 3)


def _dht(a, axes):
    a = np.asarray(a)
    shifted = np.fft.ifftshift(a, axes=axes)
    f = np.fft.fftn(shifted, axes=axes)
    h = f.real - f.imag
    scale = 1.0
    for ax in axes:
        scale *= a.shape[ax]
    out = np.fft.fftshift(h, axes=axes) / np.sqrt(scale)
    return out.astype(a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)


def dht2(img):
    """Centered 2D discrete Hartley transform (self-inverse)."""
    arr = img.data if isinstance(img, RealImage) else np.asarray(img)
    out = _dht(arr, axes=(-2, -1))
    return HartleyImage(out) if isinstance(img, RealImage) else out


def idht2(h):
    arr = h.data if isinstance(h, HartleyImage) else np.asarray(h)
    out = _dht(arr, axes=(-2, -1))
    return RealImage(out) if isinstance(h, HartleyImage) else out


def dht3(vol):
    arr = vol.data if isinstance(vol, RealVolume) else np.asarray(vol)
    return _dht(arr, axes=(-3, -2, -1))


def idht3(h):
    return _dht(np.asarray(h), axes=(-3, -2, -1))


def centered_freqs(d):
    """Integer frequencies along one axis in centered order: -D/2 .. D/2-1."""
    return np.arange(d) - d // 2


def freq_grid_2d(d):
    """(ky, kx) integer-frequency grids, each (D, D), centered."""
    f = centered_freqs(d)
    return np.meshgrid(f, f, indexing="ij")


def fourier_translate(img, t):
    """Shift image content by t = (tx, ty) pixels via the Fourier shift theorem.

    Output value at pixel x equals the input at x - t (sub-pixel t allowed).
    Implemented as the orthogonal Hartley-pair rotation, which is exact on
    every frequency pair (k, -k mod D); the three self-conjugate Nyquist bins
    are cosine-damped for non-integer shifts (translation is ill-defined
    there), so band-limited images round-trip to 1e-9.
    """
    if isinstance(img, RealImage):
        return RealImage(fourier_translate(img.data, t), img.pixel_size)
    arr = np.asarray(img, dtype=np.float64)
    tx, ty = (t.tx, t.ty) if hasattr(t, "tx") else (float(t[0]), float(t[1]))
    return idht2(fourier_translate_hartley_full(dht2(arr), (tx, ty)))


def hartley_translate_pair(h_pos, h_neg, k_frac_xy, t):
    """Translate banded Hartley samples by t pixels.

    h_pos/h_neg are values at banded frequencies +k and -k; k_frac_xy is the
    (M, 2) array of fractional frequencies (kx, ky). Matches fourier_translate.
    """
    alpha = 2 * np.pi * (k_frac_xy @ np.asarray(t, dtype=k_frac_xy.dtype))
    return np.cos(alpha) * h_pos + np.sin(alpha) * h_neg


@dataclass
class SliceCoords:
    """Banded 3D frequency coordinates for one rotation's central slice."""

    coords: np.ndarray      # (M, 3) fractional frequencies (kx, ky, kz)
    mask: np.ndarray        # (D, D) bool, True where D*|k| < k_cut
    lattice_xy: np.ndarray  # (M, 2) integer lattice frequencies (kx, ky)
    d: int
    k_cut: float


def band_mask_2d(d, k_cut):
    ky, kx = freq_grid_2d(d)
    return kx * kx + ky * ky < k_cut * k_cut


def slice_coords(rotation: Rotation, d: int, k_cut: float) -> SliceCoords:
    """Rotated central-slice coordinates R^T (kx, ky, 0) for banded frequencies."""
    if not 0 < k_cut <= d / 2:
        raise ValueError(f"k_cut must be in (0, D/2], got {k_cut}")
    mask = band_mask_2d(d, k_cut)
    ky, kx = freq_grid_2d(d)
    lattice = np.stack([kx[mask], ky[mask]], axis=-1)
    plane = np.concatenate([lattice, np.zeros((len(lattice), 1))], axis=-1) / d
    coords = plane @ rotation.matrix  # row-vector form of R^T k
    return SliceCoords(coords=coords, mask=mask, lattice_xy=lattice, d=d, k_cut=k_cut)


def rotated_plane_coords(matrices, lattice_xy, d):
    """Batched slice coordinates: (..., 3, 3) matrices -> (..., M, 3) fractions."""
    plane = np.concatenate([lattice_xy, np.zeros((len(lattice_xy), 1))], axis=-1) / d
    return np.einsum("mj,...jk->...mk", plane, matrices)


# ---------------------------------------------------------------------------
# trilinear sampling / spreading on centered grids
# ---------------------------------------------------------------------------

def trilinear_sample(grid, pts):
    """Sample grid[z, y, x] at float points (x, y, z) about the centered origin.

    pts is (M, 3) in lattice units (so +-D/2 spans the grid); out-of-range
    points return 0.
    """
    grid = np.asarray(grid)
    d = grid.shape[0]
    c = d // 2
    p = np.asarray(pts, dtype=np.float64) + c
    f = np.floor(p).astype(np.int64)
    w = p - f
    out = np.zeros(len(p), dtype=grid.dtype)
    flat = grid.ravel()
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                ix = f[:, 0] + dx
                iy = f[:, 1] + dy
                iz = f[:, 2] + dz
                ok = (ix >= 0) & (ix < d) & (iy >= 0) & (iy < d) & (iz >= 0) & (iz < d)
                wt = (
                    (w[:, 0] if dx else 1 - w[:, 0])
                    * (w[:, 1] if dy else 1 - w[:, 1])
                    * (w[:, 2] if dz else 1 - w[:, 2])
                )
                idx = (iz * d + iy) * d + ix
                vals = np.where(ok, flat[np.clip(idx, 0, d**3 - 1)], 0.0)
                out += np.where(ok, wt, 0.0) * vals
    return out


def trilinear_spread(grid, pts, values):
    """Scatter-add values at float points (x, y, z) with trilinear weights."""
    d = grid.shape[0]
    c = d // 2
    p = np.asarray(pts, dtype=np.float64) + c
    f = np.floor(p).astype(np.int64)
    w = p - f
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                ix = f[:, 0] + dx
                iy = f[:, 1] + dy
                iz = f[:, 2] + dz
                ok = (ix >= 0) & (ix < d) & (iy >= 0) & (iy < d) & (iz >= 0) & (iz < d)
                wt = (
                    (w[:, 0] if dx else 1 - w[:, 0])
                    * (w[:, 1] if dy else 1 - w[:, 1])
                    * (w[:, 2] if dz else 1 - w[:, 2])
                )
                np.add.at(grid, (iz[ok], iy[ok], ix[ok]), (wt * values)[ok])


# ---------------------------------------------------------------------------
# real-space projection oracle and backprojection
# ---------------------------------------------------------------------------

def real_space_project(vol, pose: Pose) -> "RealImage":
    """Line-integral projection: rotate the volume by R, sum along z, shift by t.

    Sampling uses trilinear interpolation with zeros outside the ball of
    radius D/2; consistent with slice_coords via the Fourier slice theorem.
    """
    if isinstance(vol, RealVolume):
        arr, px = vol.data, vol.pixel_size
    else:
        arr, px = np.asarray(vol), 1.0
    d = arr.shape[0]
    ax = np.arange(d) - d // 2
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1).astype(np.float64)
    inside = np.einsum("ij,ij->i", pts, pts) <= (d / 2) ** 2
    rot_pts = pts @ pose.rotation.matrix  # row-vector form of R^T u
    vals = np.zeros(len(pts))
    vals[inside] = trilinear_sample(arr, rot_pts[inside])
    proj = vals.reshape(d, d, d).sum(axis=0)
    out = fourier_translate(proj, pose.translation.vec)
    return RealImage(out, px)


def backproject(images, ctfs, poses, d=None, pixel_size=1.0) -> RealVolume:
    """Wiener-style insertion of Hartley slices at their poses.

    images: list of HartleyImage (or arrays); ctfs: matching D x D arrays;
    poses: matching Pose list. Accumulates CTF*image and CTF^2 with trilinear
    spreading, divides by (CTF^2 + eps), eps = 1e-3 * max weight.
    """
    if len(images) == 0:
        raise ValueError("backproject requires at least one image")
    if not (len(images) == len(ctfs) == len(poses)):
        raise ValueError("images, ctfs, poses must have equal lengths")
    first = images[0].data if isinstance(images[0], HartleyImage) else np.asarray(images[0])
    d = d or first.shape[0]
    num = np.zeros((d, d, d))
    wt = np.zeros((d, d, d))
    mask = band_mask_2d(d, d / 2)
    ky, kx = freq_grid_2d(d)
    lattice = np.stack([kx[mask], ky[mask]], axis=-1).astype(np.float64)
    plane = np.concatenate([lattice, np.zeros((len(lattice), 1))], axis=-1)
    for img, ctf, pose in zip(images, ctfs, poses):
        h = img.data if isinstance(img, HartleyImage) else np.asarray(img)
        c = np.asarray(ctf)
        h_shifted = fourier_translate_hartley_full(h, -pose.translation.vec)
        pts = plane @ pose.rotation.matrix  # R^T k in lattice units
        trilinear_spread(num, pts, (c[mask] * h_shifted[mask]))
        trilinear_spread(wt, pts, (c[mask] ** 2))
    eps = 1e-3 * wt.max() if wt.max() > 0 else 1e-12
    vol = idht3(num / (wt + eps))
    return RealVolume(vol, pixel_size)


def fourier_translate_hartley_full(h, t):
    """Translate a full D x D Hartley image by t pixels (centered lattice).

    H'(k) = cos(a) H(k) + sin(a) H(-k) with a = 2 pi k.t / D over the pairable
    frequency components; Nyquist (-D/2) components have no mod-D partner and
    contribute a scalar cos(pi t) factor instead. Exactly orthogonal (hence
    invertible) on the open band |k_j| < D/2, exact circular shift for
    integer t everywhere.
    """
    h = np.asarray(h, dtype=np.float64)
    d = h.shape[0]
    tx, ty = float(t[0]), float(t[1])
    ky, kx = freq_grid_2d(d)
    x_nyq = kx == -d // 2
    y_nyq = ky == -d // 2
    beta = 2 * np.pi * (np.where(x_nyq, 0, kx) * tx + np.where(y_nyq, 0, ky) * ty) / d
    damp = np.where(x_nyq, np.cos(np.pi * tx), 1.0) * np.where(y_nyq, np.cos(np.pi * ty), 1.0)
    h_neg = negated_frequency_view(h)
    return damp * (np.cos(beta) * h + np.sin(beta) * h_neg)


def negated_frequency_view(h):
    """H(-k) on the centered lattice; the partnerless -D/2 row/col map to themselves."""
    h = np.asarray(h)
    d = h.shape[-1]
    rev = np.concatenate([[0], np.arange(d - 1, 0, -1)])  # index of -freq per axis
    return h[..., rev, :][..., :, rev]
