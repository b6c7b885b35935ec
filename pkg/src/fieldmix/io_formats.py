"""Binary stack/volume containers, CSV tables, and atomic artifact writes.

Formats (all little-endian):
  particle stack: magic 'HYPS', u32 version=1, u32 N, u32 D, N*D*D float32
                  pixels, image-major, row-major within an image.
  volume:         magic 'HYVL', u32 version=1, u32 D, f32 pixel size (A),
                  D^3 float32 values, z-major.
  CTF table:      CSV 'index,defocus_u,defocus_v,ast_angle,voltage,cs,w,
                  phase_shift,pixel_size', one dense-indexed row per image.
  manifest:       CSV 'index,class,z_true,qw,qx,qy,qz,tx,ty' plus a key=value
                  sidecar (seed, SNR, D, N, ...).

Writes go through a temp-file-plus-rename so interrupted runs never leave a
partial artifact under its final name.
"""

from __future__ import annotations

import io
import os
import struct
import zipfile

import numpy as np

STACK_MAGIC = b"HYPS"
VOLUME_MAGIC = b"HYVL"
CTF_HEADER = "index,defocus_u,defocus_v,ast_angle,voltage,cs,w,phase_shift,pixel_size"
MANIFEST_HEADER = "index,class,z_true,qw,qx,qy,qz,tx,ty"


class FileFormatError(ValueError):
    """Malformed artifact file; message carries the offending offset/line."""


def atomic_write_bytes(path, data: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# particle stack
# ---------------------------------------------------------------------------

def write_particle_stack(path, images):
    images = np.ascontiguousarray(np.asarray(images, dtype="<f4"))
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"stack must be (N, D, D), got {images.shape}")
    n, d, _ = images.shape
    atomic_write_bytes(path, STACK_MAGIC + struct.pack("<III", 1, n, d) + images.tobytes())


def read_particle_stack(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FileFormatError(f"{path}: truncated header, {len(raw)} bytes < 16")
    if raw[:4] != STACK_MAGIC:
        raise FileFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {STACK_MAGIC!r}")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != 1:
        raise FileFormatError(f"{path}: unsupported version {version} at offset 4")
    expected = 16 + 4 * n * d * d
    if len(raw) != expected:
        raise FileFormatError(f"{path}: size mismatch, expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(n, d, d).copy()


# ---------------------------------------------------------------------------
# volume
# ---------------------------------------------------------------------------

def write_volume(path, vol, pixel_size):
    vol = np.ascontiguousarray(np.asarray(vol, dtype="<f4"))
    if vol.ndim != 3 or len(set(vol.shape)) != 1:
        raise ValueError(f"volume must be (D, D, D), got {vol.shape}")
    d = vol.shape[0]
    atomic_write_bytes(
        path, VOLUME_MAGIC + struct.pack("<II", 1, d) + struct.pack("<f", pixel_size) + vol.tobytes()
    )


def read_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FileFormatError(f"{path}: truncated header, {len(raw)} bytes < 16")
    if raw[:4] != VOLUME_MAGIC:
        raise FileFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {VOLUME_MAGIC!r}")
    version, d = struct.unpack("<II", raw[4:12])
    if version != 1:
        raise FileFormatError(f"{path}: unsupported version {version} at offset 4")
    (pixel_size,) = struct.unpack("<f", raw[12:16])
    expected = 16 + 4 * d**3
    if len(raw) != expected:
        raise FileFormatError(f"{path}: size mismatch, expected {expected} bytes, got {len(raw)}")
    vol = np.frombuffer(raw[16:], dtype="<f4").reshape(d, d, d).copy()
    return vol, float(pixel_size)


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def write_ctf_table(path, rows):
    """rows: (N, 8) array of CTF parameters in header order (minus index)."""
    rows = np.asarray(rows, dtype=np.float64)
    lines = [CTF_HEADER]
    for i, row in enumerate(rows):
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_ctf_table(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CTF_HEADER:
        raise FileFormatError(f"{path}: line 1: bad header")
    out = np.empty((len(lines) - 1, 8))
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 9:
            raise FileFormatError(f"{path}: line {ln}: expected 9 fields, got {len(parts)}")
        if int(parts[0]) != ln - 2:
            raise FileFormatError(f"{path}: line {ln}: index {parts[0]} not dense")
        out[ln - 2] = [float(v) for v in parts[1:]]
    return out


def write_manifest(path, classes, z_true, quats, trans, meta: dict):
    n = len(classes)
    lines = [MANIFEST_HEADER]
    for i in range(n):
        q = quats[i]
        t = trans[i]
        lines.append(
            f"{i},{int(classes[i])},{repr(float(z_true[i]))},"
            + ",".join(repr(float(v)) for v in q)
            + f",{repr(float(t[0]))},{repr(float(t[1]))}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
    atomic_write_text(sidecar_path(path), serialize_keyvalues(meta))


def sidecar_path(manifest_path):
    return str(manifest_path) + ".meta"


def read_manifest(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FileFormatError(f"{path}: line 1: bad header")
    n = len(lines) - 1
    classes = np.empty(n, dtype=np.int64)
    z_true = np.empty(n)
    quats = np.empty((n, 4))
    trans = np.empty((n, 2))
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 9:
            raise FileFormatError(f"{path}: line {ln}: expected 9 fields, got {len(parts)}")
        if int(parts[0]) != ln - 2:
            raise FileFormatError(f"{path}: line {ln}: index {parts[0]} not dense")
        i = ln - 2
        classes[i] = int(parts[1])
        z_true[i] = float(parts[2])
        quats[i] = [float(v) for v in parts[3:7]]
        trans[i] = [float(v) for v in parts[7:9]]
        norm = float(np.linalg.norm(quats[i]))
        if abs(norm - 1.0) > 1e-6:
            raise FileFormatError(f"{path}: line {ln}: quaternion norm {norm} not within 1e-6 of 1")
    meta = parse_keyvalues(open(sidecar_path(path)).read())
    return classes, z_true, quats, trans, meta


def serialize_keyvalues(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def parse_keyvalues(text: str) -> dict:
    out = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FileFormatError(f"line {ln}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# deterministic npz (fixed zip metadata so equal arrays give equal bytes)
# ---------------------------------------------------------------------------

def save_npz_deterministic(path, arrays: dict):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            payload = io.BytesIO()
            np.lib.format.write_array(payload, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_npz(path):
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}
