"""Synthetic heterogeneous particle stacks with known ground truth.

Classes are procedural Gaussian-blob phantoms; one blob per class may carry a
motion vector scaled by a scalar conformation coordinate z in [-1, 1]. Images
follow the standard forward model: project, multiply by the CTF in frequency
space, add white Gaussian noise at a target SNR (signal variance measured
over the full clean stack), then rescale the stack so the noise has unit
variance. Everything is a pure function of (seed, image index), so parallel
and serial generation agree bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, config_hash, serialize_config
from .geometry import Pose, Rotation, Translation2D, random_quats
from .io_formats import (
    atomic_write_text,
    write_ctf_table,
    write_manifest,
    write_particle_stack,
)
from .transforms import RealVolume, dht2, freq_grid_2d, idht2, real_space_project

SUPPORT_FRACTION = 0.4


@dataclass(frozen=True)
class Blob:
    center: tuple          # (cx, cy, cz) px
    amplitude: float
    width: float           # isotropic sigma, px
    motion: tuple = (0.0, 0.0, 0.0)  # px displacement at z = +1


@dataclass(frozen=True)
class PhantomSpec:
    class_id: int
    blobs: tuple
    box_size: int

    def __post_init__(self):
        if len(self.blobs) < 3:
            raise ValueError("phantom needs at least 3 blobs")
        limit = SUPPORT_FRACTION * self.box_size
        for b in self.blobs:
            reach = np.linalg.norm(b.center) + np.linalg.norm(b.motion)
            if reach > limit:
                raise ValueError(
                    f"blob at {b.center} with motion {b.motion} leaves the support ball "
                    f"({reach:.2f} > {limit:.2f})"
                )

    @property
    def has_motion(self):
        return any(np.linalg.norm(b.motion) > 0 for b in self.blobs)

    def signature(self):
        """Rigid-motion-invariant fingerprint for distinctness checks."""
        centers = np.array([b.center for b in self.blobs])
        dists = sorted(
            round(float(np.linalg.norm(centers[i] - centers[j])), 6)
            for i in range(len(centers))
            for j in range(i + 1, len(centers))
        )
        aw = sorted((round(b.amplitude, 6), round(b.width, 6)) for b in self.blobs)
        return (tuple(dists), tuple(aw))


def render_phantom(spec: PhantomSpec, z_true: float) -> RealVolume:
    """Rasterize the blob sum at conformation z_true on the D^3 grid."""
    if not -1.0 <= z_true <= 1.0:
        raise ValueError(f"z_true must be in [-1, 1], got {z_true}")
    d = spec.box_size
    limit = SUPPORT_FRACTION * d
    ax = np.arange(d) - d // 2
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    vol = np.zeros((d, d, d))
    for b in spec.blobs:
        c = np.asarray(b.center) + z_true * np.asarray(b.motion)
        if np.linalg.norm(c) > limit:
            raise ValueError(f"blob leaves the support ball at z={z_true}")
        vol += b.amplitude * np.exp(
            -((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / (2 * b.width**2)
        )
    return RealVolume(vol)


def _scaled(frac_blobs, d, arm=None):
    """Blob tuples given in units of D/32 so phantoms scale with box size."""
    s = d / 32.0
    out = []
    for i, (cx, cy, cz, a, w) in enumerate(frac_blobs):
        motion = (0.0, 0.0, 0.0)
        if arm is not None and i == arm[0]:
            motion = tuple(s * v for v in arm[1])
        out.append(Blob((s * cx, s * cy, s * cz), a, s * w, motion))
    return tuple(out)


def builtin_phantoms(name: str, box_size: int):
    """Shipped phantom sets: 'static3' and 'arms3' (one moving arm per class)."""
    compact = [
        (0.0, 0.0, 0.0, 1.0, 2.6),
        (5.5, 0.5, 0.0, 0.9, 2.0),
        (-2.0, 4.5, 1.0, 0.9, 2.0),
        (-2.5, -3.5, -3.0, 0.8, 1.8),
        (1.0, -5.0, 4.5, 0.9, 1.8),
    ]
    rod = [
        (-7.0, -0.5, 0.0, 0.9, 2.0),
        (-2.5, 0.0, 1.0, 1.0, 2.2),
        (2.0, 0.5, -1.0, 0.9, 2.0),
        (6.5, 1.5, 0.5, 0.8, 1.9),
        (0.0, 4.5, -3.0, 0.9, 1.8),
    ]
    ell = [
        (-5.0, -4.0, 0.5, 0.9, 2.1),
        (0.0, -4.5, -0.5, 1.0, 2.3),
        (5.0, -4.0, 0.0, 0.8, 1.9),
        (-5.0, 1.5, 1.5, 0.9, 2.0),
        (-4.5, 6.0, -1.0, 0.9, 1.8),
    ]
    arms = [
        (4, (0.0, 3.0, 3.5)),   # compact: knob swings up
        (4, (4.0, 0.0, 3.0)),   # rod: tip sweeps sideways
        (4, (3.5, 0.0, -3.5)),  # ell: top arm folds
    ]
    if name == "static3":
        sets = [_scaled(compact, box_size), _scaled(rod, box_size), _scaled(ell, box_size)]
    elif name == "arms3":
        sets = [
            _scaled(compact, box_size, arms[0]),
            _scaled(rod, box_size, arms[1]),
            _scaled(ell, box_size, arms[2]),
        ]
    else:
        raise ValueError(f"unknown phantom set {name!r}")
    specs = [PhantomSpec(k, blobs, box_size) for k, blobs in enumerate(sets)]
    sigs = [s.signature() for s in specs]
    assert len(set(sigs)) == len(sigs), "phantom classes must be pairwise distinct"
    return specs


def phantoms_to_json(specs):
    return json.dumps(
        [
            {
                "class_id": s.class_id,
                "box_size": s.box_size,
                "blobs": [
                    {
                        "center": list(b.center),
                        "amplitude": b.amplitude,
                        "width": b.width,
                        "motion": list(b.motion),
                    }
                    for b in s.blobs
                ],
            }
            for s in specs
        ],
        indent=2,
        sort_keys=True,
    )


def phantoms_from_json(text):
    out = []
    for rec in json.loads(text):
        blobs = tuple(
            Blob(tuple(b["center"]), b["amplitude"], b["width"], tuple(b["motion"]))
            for b in rec["blobs"]
        )
        out.append(PhantomSpec(rec["class_id"], blobs, rec["box_size"]))
    return out


# ---------------------------------------------------------------------------
# CTF
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CtfParams:
    defocus_u: float        # A
    defocus_v: float        # A
    ast_angle: float        # rad
    voltage: float          # kV
    cs: float               # mm
    w: float                # amplitude contrast fraction
    phase_shift: float      # rad
    pixel_size: float       # A / px

    def __post_init__(self):
        if self.defocus_u <= 0 or self.defocus_v <= 0:
            raise ValueError("defocus must be positive")
        if not 0 <= self.w <= 1:
            raise ValueError("amplitude contrast must be in [0, 1]")

    def as_row(self):
        return [
            self.defocus_u,
            self.defocus_v,
            self.ast_angle,
            self.voltage,
            self.cs,
            self.w,
            self.phase_shift,
            self.pixel_size,
        ]

    @classmethod
    def from_row(cls, row):
        return cls(*[float(v) for v in row])


def electron_wavelength(voltage_kv):
    """Relativistic electron wavelength in Angstroms."""
    v = voltage_kv * 1000.0
    return 12.2639 / math.sqrt(v + 0.97845e-6 * v * v)


def ctf_evaluate_at(params: CtfParams, kx, ky):
    """CTF at frequencies (kx, ky) in A^-1.

    CTF = -sqrt(1 - w^2) sin(gamma) - w cos(gamma),
    gamma = -pi lambda z(a) |k|^2 + (pi/2) Cs lambda^3 |k|^4 + phase_shift,
    with the astigmatic defocus z(a) and Cs converted from mm to A.
    """
    lam = electron_wavelength(params.voltage)
    k2 = kx * kx + ky * ky
    ang = np.arctan2(ky, kx)
    z_avg = 0.5 * (params.defocus_u + params.defocus_v)
    z_diff = 0.5 * (params.defocus_u - params.defocus_v)
    z = z_avg + z_diff * np.cos(2 * (ang - params.ast_angle))
    cs_a = params.cs * 1e7
    gamma = -np.pi * lam * z * k2 + (np.pi / 2) * cs_a * lam**3 * k2 * k2 + params.phase_shift
    return -math.sqrt(1 - params.w**2) * np.sin(gamma) - params.w * np.cos(gamma)


def ctf_grid(params: CtfParams, d):
    """CTF on the full centered D x D lattice."""
    ky, kx = freq_grid_2d(d)
    scale = 1.0 / (d * params.pixel_size)
    return ctf_evaluate_at(params, kx * scale, ky * scale)


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

def _image_rng(seed, tag, index):
    return np.random.default_rng(np.random.SeedSequence((int(seed), tag, int(index))))

_TAG_LATENT = 0x51D
_TAG_NOISE = 0x401


def sample_image_truth(cfg: RunConfig, specs, index):
    """Draw (class, z, pose, ctf) for one image from its private stream."""
    rng = _image_rng(cfg.seed, _TAG_LATENT, index)
    props = np.asarray(cfg.class_proportions, dtype=np.float64)
    props = props / props.sum()
    k = int(rng.choice(len(props), p=props))
    z = float(rng.uniform(-1, 1)) if specs[k].has_motion else 0.0
    quat = random_quats(rng, 1)[0]
    tx, ty = rng.uniform(-cfg.trans_extent_px, cfg.trans_extent_px, 2)
    defocus_u = float(rng.uniform(cfg.defocus_min, cfg.defocus_max))
    astig = float(rng.uniform(0, cfg.astig_max))
    ctf = CtfParams(
        defocus_u=defocus_u,
        defocus_v=defocus_u - astig,
        ast_angle=float(rng.uniform(0, np.pi)),
        voltage=cfg.voltage_kv,
        cs=cfg.cs_mm,
        w=cfg.amplitude_contrast,
        phase_shift=cfg.phase_shift,
        pixel_size=cfg.pixel_size,
    )
    return k, z, quat, (float(tx), float(ty)), ctf


def render_clean_image(cfg, spec, z, quat, trans, ctf):
    vol = render_phantom(spec, z)
    pose = Pose(Rotation.from_quat(quat), Translation2D(*trans))
    proj = real_space_project(vol.data, pose)
    return idht2(ctf_grid(ctf, cfg.box_size) * dht2(proj.data))


def simulate_dataset(cfg: RunConfig, out_dir):
    """Write stack, clean stack, CTF table, manifest (+sidecar), phantoms, config."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    specs = builtin_phantoms(cfg.phantom_set, cfg.box_size)
    if len(specs) != len(cfg.class_proportions):
        raise ValueError(
            f"{len(cfg.class_proportions)} class proportions for {len(specs)} phantom classes"
        )
    n, d = cfg.n_images, cfg.box_size
    clean = np.empty((n, d, d), dtype=np.float64)
    classes = np.empty(n, dtype=np.int64)
    z_true = np.empty(n)
    quats = np.empty((n, 4))
    trans = np.empty((n, 2))
    ctf_rows = np.empty((n, 8))
    for i in range(n):
        k, z, quat, t, ctf = sample_image_truth(cfg, specs, i)
        classes[i], z_true[i], quats[i], trans[i] = k, z, quat, t
        ctf_rows[i] = ctf.as_row()
        clean[i] = render_clean_image(cfg, specs[k], z, quat, t, ctf)

    signal_var = float(clean.var())
    if math.isinf(cfg.snr):
        noise_std = 0.0
        scale = 1.0 / math.sqrt(signal_var)
        noisy = clean.copy()
    else:
        noise_std = math.sqrt(signal_var / cfg.snr)
        scale = 1.0 / noise_std
        noisy = clean.copy()
        for i in range(n):
            noisy[i] += _image_rng(cfg.seed, _TAG_NOISE, i).normal(0.0, noise_std, (d, d))
    noisy *= scale
    clean_scaled = clean * scale

    write_particle_stack(os.path.join(out_dir, "particles.hyps"), noisy.astype(np.float32))
    write_particle_stack(
        os.path.join(out_dir, "particles_clean.hyps"), clean_scaled.astype(np.float32)
    )
    write_ctf_table(os.path.join(out_dir, "ctf.csv"), ctf_rows)
    meta = {
        "seed": cfg.seed,
        "snr": "inf" if math.isinf(cfg.snr) else repr(cfg.snr),
        "D": d,
        "N": n,
        "pixel_size": repr(cfg.pixel_size),
        "intensity_scale": repr(scale),
        "config_hash": config_hash(cfg),
    }
    write_manifest(os.path.join(out_dir, "manifest.csv"), classes, z_true, quats, trans, meta)
    atomic_write_text(os.path.join(out_dir, "phantoms.json"), phantoms_to_json(specs))
    atomic_write_text(os.path.join(out_dir, "config.cfg"), serialize_config(cfg))
    return {
        "classes": classes,
        "z_true": z_true,
        "quats": quats,
        "trans": trans,
        "scale": scale,
        "signal_var": signal_var,
    }
