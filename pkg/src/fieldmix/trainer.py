"""Two-phase optimization: hierarchical pose search alternating with SGD,
then joint SGD including poses.

Every update is a pure function of (seed, epoch, batch); per-image pose
searches fan out to a fork-based worker pool and are reduced in image-index
order, so results are bit-identical across worker-pool sizes. The coordinator
owns all gradient math (one batched forward/backward per class per step).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import multiprocessing as mp

import numpy as np
from threadpoolctl import threadpool_limits

from . import field as fd
from . import mixture as mx
from . import posesearch as ps
from .config import RunConfig, config_hash, serialize_config
from .geometry import (
    GridConfig,
    build_base_grid,
    quat_to_matrix,
    matrix_to_quat,
    rot6_backward,
    rot6_from_matrix,
    rot6_to_matrix,
)
from .io_formats import (
    atomic_write_text,
    load_npz,
    parse_keyvalues,
    read_ctf_table,
    read_manifest,
    read_particle_stack,
    save_npz_deterministic,
    serialize_keyvalues,
)
from .simulator import CtfParams, ctf_grid, phantoms_from_json
from .transforms import band_mask_2d, dht2, freq_grid_2d, negated_frequency_view

PHASE_HPS = 0
PHASE_SGD = 1


def resolve_workers(requested=None):
    cap = os.environ.get("HYDRA_LITE_THREADS")
    if requested is None:
        requested = int(cap) if cap else (os.cpu_count() or 1)
    elif cap:
        requested = min(requested, int(cap))
    return max(1, requested)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

class Dataset:
    """Particle stack plus CTF table, manifest, and phantom ground truth."""

    def __init__(self, data_dir):
        self.dir = str(data_dir)
        self.images = read_particle_stack(os.path.join(self.dir, "particles.hyps"))
        self.n, self.d, _ = self.images.shape
        ctf_rows = read_ctf_table(os.path.join(self.dir, "ctf.csv"))
        if len(ctf_rows) != self.n:
            raise ValueError(f"CTF table has {len(ctf_rows)} rows for {self.n} images")
        self.ctf_params = [CtfParams.from_row(r) for r in ctf_rows]
        (self.classes, self.z_true, self.gt_quats, self.gt_trans, self.meta) = read_manifest(
            os.path.join(self.dir, "manifest.csv")
        )
        phantom_path = os.path.join(self.dir, "phantoms.json")
        self.phantoms = None
        if os.path.exists(phantom_path):
            with open(phantom_path) as f:
                self.phantoms = phantoms_from_json(f.read())
        self.pixel_size = float(self.meta.get("pixel_size", 1.0))
        # frequency-domain views used by every step
        self.h_pos = np.stack([dht2(img.astype(np.float64)) for img in self.images]).astype(
            np.float32
        )
        self.h_neg = np.stack([negated_frequency_view(h) for h in self.h_pos])
        self.ctf_grids = np.stack(
            [ctf_grid(p, self.d).astype(np.float32) for p in self.ctf_params]
        )


# ---------------------------------------------------------------------------
# run state
# ---------------------------------------------------------------------------

@dataclass
class RunState:
    config: RunConfig
    featurizer: fd.FourierFeaturizer
    weights: list
    weight_adam: list            # per class: {tensor_name: AdamState}
    scores: np.ndarray           # (N, K)
    scores_m: np.ndarray
    scores_v: np.ndarray
    scores_steps: np.ndarray
    z: np.ndarray                # (N, K, d)
    z_m: np.ndarray
    z_v: np.ndarray
    z_steps: np.ndarray
    pose_quats: np.ndarray       # (N, K, 4)
    pose_trans: np.ndarray       # (N, K, 2)
    rot6: np.ndarray             # (N, K, 6), valid in the SGD phase
    rot6_m: np.ndarray
    rot6_v: np.ndarray
    trans_m: np.ndarray
    trans_v: np.ndarray
    pose_steps: np.ndarray
    images_seen: int = 0
    epoch: int = 0
    phase: int = PHASE_HPS
    dtype: type = np.float32

    def rotation_matrices(self, idx):
        if self.phase == PHASE_SGD:
            return rot6_to_matrix(self.rot6[idx])
        return quat_to_matrix(self.pose_quats[idx])

    def current_quats(self):
        if self.phase == PHASE_SGD:
            mats = rot6_to_matrix(self.rot6.reshape(-1, 6))
            return np.stack([matrix_to_quat(m) for m in mats]).reshape(self.pose_quats.shape)
        return self.pose_quats


def init_run(cfg: RunConfig, dataset: Dataset, dtype=np.float32) -> RunState:
    if dataset.d != cfg.box_size:
        raise ValueError(f"config box_size {cfg.box_size} != dataset D {dataset.d}")
    if dataset.n != cfg.n_images:
        raise ValueError(f"config n_images {cfg.n_images} != dataset N {dataset.n}")
    n, k, d_lat = dataset.n, cfg.n_classes, cfg.conf_dim
    featurizer = fd.FourierFeaturizer(cfg.n_frequencies, sigma=0.5, seed=cfg.seed)
    weights, adams = [], []
    for kk in range(k):
        w = fd.init_field_weights(
            featurizer.n_features, d_lat, cfg.field_width, seed=cfg.seed * 1000 + kk, dtype=dtype
        )
        weights.append(w)
        adams.append({name: fd.AdamState.for_param(t) for name, t in w.tensors()})
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x1A7E)))
    z = rng.normal(0.0, 0.1, size=(n, k, d_lat)).astype(dtype)
    quats = np.zeros((n, k, 4))
    quats[..., 0] = 1.0
    return RunState(
        config=cfg,
        featurizer=featurizer,
        weights=weights,
        weight_adam=adams,
        scores=np.zeros((n, k), dtype=np.float64),
        scores_m=np.zeros((n, k)),
        scores_v=np.zeros((n, k)),
        scores_steps=np.zeros(n, dtype=np.int64),
        z=z,
        z_m=np.zeros((n, k, d_lat)),
        z_v=np.zeros((n, k, d_lat)),
        z_steps=np.zeros(n, dtype=np.int64),
        pose_quats=quats,
        pose_trans=np.zeros((n, k, 2)),
        rot6=np.zeros((n, k, 6)),
        rot6_m=np.zeros((n, k, 6)),
        rot6_v=np.zeros((n, k, 6)),
        trans_m=np.zeros((n, k, 2)),
        trans_v=np.zeros((n, k, 2)),
        pose_steps=np.zeros(n, dtype=np.int64),
        dtype=dtype,
    )


def grid_config(cfg: RunConfig) -> GridConfig:
    return GridConfig(
        s2_points=cfg.s2_points,
        inplane_points=cfg.inplane_points,
        trans_extent_px=cfg.trans_extent_px,
        trans_points_per_axis=cfg.trans_points_per_axis,
    )


def hps_threshold(cfg: RunConfig, n: int) -> int:
    return max(cfg.hps_image_budget, 2 * n)


# ---------------------------------------------------------------------------
# batched objective and gradients
# ---------------------------------------------------------------------------

class BandInfo:
    def __init__(self, d, k_cut):
        self.d = d
        self.k_cut = int(k_cut)
        self.mask = band_mask_2d(d, self.k_cut)
        ky, kx = freq_grid_2d(d)
        self.lattice_xy = np.stack([kx[self.mask], ky[self.mask]], axis=-1).astype(np.float64)
        self.k_frac = self.lattice_xy / d
        self.plane = np.concatenate(
            [self.k_frac, np.zeros((len(self.k_frac), 1))], axis=-1
        )
        self.m = len(self.k_frac)


_BAND_CACHE = {}


def get_band(d, k_cut):
    key = (d, int(k_cut))
    if key not in _BAND_CACHE:
        _BAND_CACHE[key] = BandInfo(d, k_cut)
    return _BAND_CACHE[key]


def batch_objective(state: RunState, dataset: Dataset, idx, k_cut, want_grads=True):
    """Mean mixture NLL over the batch and gradients for every parameter group.

    Pose gradients are produced only in the SGD phase; during HPS the poses
    are search outputs and stay frozen within the gradient step.
    """
    cfg = state.config
    band = get_band(dataset.d, k_cut)
    idx = np.asarray(idx)
    b, k, m = len(idx), cfg.n_classes, band.m
    dtype = state.dtype

    h_pos = dataset.h_pos[idx][:, band.mask].astype(np.float64)
    h_neg = dataset.h_neg[idx][:, band.mask].astype(np.float64)
    ctf = dataset.ctf_grids[idx][:, band.mask].astype(np.float64)
    trans = state.pose_trans[idx]
    alpha = 2 * np.pi * np.einsum("mj,bkj->bkm", band.k_frac, trans)
    cos_a, sin_a = np.cos(alpha), np.sin(alpha)
    obs = cos_a * h_pos[:, None, :] - sin_a * h_neg[:, None, :]

    mats = state.rotation_matrices(idx)  # (B, K, 3, 3)
    preds = np.empty((b, k, m))
    tapes = []
    coords_all = []
    for kk in range(k):
        coords = np.einsum("mj,bjk->bmk", band.plane, mats[:, kk]).reshape(-1, 3).astype(dtype)
        feat = state.featurizer.featurize(coords)
        z_big = np.repeat(state.z[idx, kk], m, axis=0) if cfg.conf_dim > 0 else None
        tape = {}
        vals = fd.field_forward(state.weights[kk], feat, z_big, tape=tape)
        preds[:, kk, :] = vals.reshape(b, m).astype(np.float64)
        tapes.append(tape)
        coords_all.append(coords)

    sigma2m = cfg.sigma**2 * m
    resid = obs - ctf[:, None, :] * preds
    r = np.einsum("bkm,bkm->bk", resid, resid) / (2 * sigma2m)
    logits = -r + mx.log_softmax(state.scores[idx])
    hi = logits.max(axis=1, keepdims=True)
    w = np.exp(logits - hi)
    tot = w.sum(axis=1, keepdims=True)
    nlls = -(hi[:, 0] + np.log(tot[:, 0]))
    gamma = w / tot
    loss = float(nlls.mean())
    if not want_grads:
        return loss, nlls, None

    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss in batch_objective")

    out = {}
    out["scores"] = (mx.class_probs(state.scores[idx]) - gamma) / b
    coef = gamma / (sigma2m * b)  # d loss / d r_k per image
    dpred = -coef[:, :, None] * ctf[:, None, :] * resid
    dobs = coef[:, :, None] * resid

    grad_weights = []
    grad_z = np.zeros((b, k, cfg.conf_dim))
    grad_rot6 = np.zeros((b, k, 6))
    grad_trans = np.zeros((b, k, 2))
    for kk in range(k):
        upstream = dpred[:, kk, :].reshape(-1).astype(dtype)
        g_w, g_z, g_feat = fd.field_backward(state.weights[kk], tapes[kk], upstream)
        grad_weights.append(g_w)
        if cfg.conf_dim > 0:
            grad_z[:, kk, :] = g_z.reshape(b, m, cfg.conf_dim).sum(axis=1)
        if state.phase == PHASE_SGD:
            g_coords = state.featurizer.featurize_backward(coords_all[kk], g_feat).reshape(
                b, m, 3
            )
            rows = np.einsum("mi,bmj->bij", band.plane, g_coords.astype(np.float64))
            grad_rot6[:, kk, :] = rot6_backward(
                state.rot6[idx, kk], rows[:, 0, :], rows[:, 1, :]
            )
    if state.phase == PHASE_SGD:
        # d obs_shift / d t = 2 pi k (-sin a * H - cos a * H_neg)
        v = -sin_a * h_pos[:, None, :] - cos_a * h_neg[:, None, :]
        grad_trans[:, :, 0] = 2 * np.pi * np.einsum("bkm,bkm,m->bk", dobs, v, band.k_frac[:, 0])
        grad_trans[:, :, 1] = 2 * np.pi * np.einsum("bkm,bkm,m->bk", dobs, v, band.k_frac[:, 1])

    out["weights"] = grad_weights
    out["z"] = grad_z
    out["rot6"] = grad_rot6
    out["trans"] = grad_trans
    return loss, nlls, out


def apply_gradients(state: RunState, idx, grads, lrs=None):
    cfg = state.config
    lrs = lrs or {}
    lr_w = lrs.get("weights", cfg.lr_weights)
    lr_s = lrs.get("scores", cfg.lr_scores)
    lr_z = lrs.get("conf", cfg.lr_conf)
    lr_p = lrs.get("poses", cfg.lr_poses)
    idx = np.asarray(idx)
    for kk, g_w in enumerate(grads["weights"]):
        named = dict(g_w.tensors())
        for name, tensor in state.weights[kk].tensors():
            fd.adam_step(tensor, named[name], state.weight_adam[kk][name], lr_w)
    fd.adam_step_rows(
        state.scores, grads["scores"], state.scores_m, state.scores_v, state.scores_steps, idx, lr_s
    )
    if cfg.conf_dim > 0:
        fd.adam_step_rows(state.z, grads["z"].astype(state.z.dtype), state.z_m, state.z_v, state.z_steps, idx, lr_z)
    if state.phase == PHASE_SGD and lr_p > 0:
        fd.adam_step_rows(
            state.rot6, grads["rot6"], state.rot6_m, state.rot6_v, state.pose_steps, idx, lr_p
        )
        state.pose_steps[idx] -= 1  # shared counter: bump once for both pose tensors
        fd.adam_step_rows(
            state.pose_trans, grads["trans"], state.trans_m, state.trans_v, state.pose_steps, idx, lr_p
        )


# ---------------------------------------------------------------------------
# pose-search fan-out
# ---------------------------------------------------------------------------

_WORKER = {}


def _setup_worker_state(dataset: Dataset, cfg: RunConfig):
    _WORKER.clear()
    _WORKER.update(
        dataset=dataset,
        grid=build_base_grid(grid_config(cfg)),
        tables={},
        featurizer=None,
        cfg=cfg,
    )


def _get_table(k_cut):
    tables = _WORKER["tables"]
    if k_cut not in tables:
        tables[k_cut] = ps.SliceTable(_WORKER["grid"], _WORKER["dataset"].d, k_cut)
    return tables[k_cut]


def _hps_chunk(args):
    """Search poses for a chunk of images; runs in a worker or inline."""
    indices, k_cut, weights_list, featurizer, z_rows, dtype = args
    with threadpool_limits(limits=1):
        dataset = _WORKER["dataset"]
        grid = _WORKER["grid"]
        table = _get_table(k_cut)
        out = []
        for row, i in enumerate(indices):
            obs = ps.ObservationPack(
                h_pos=dataset.h_pos[i][table.mask],
                h_neg=dataset.h_neg[i][table.mask],
                ctf=dataset.ctf_grids[i][table.mask],
            )
            per_class = []
            for kk, w in enumerate(weights_list):
                z_k = z_rows[row, kk] if z_rows.shape[-1] > 0 else None
                source = ps.FieldSliceSource(w, featurizer, z_k, dtype=dtype)
                pose, score, _ = ps.hps(obs, source, grid, table)
                per_class.append(
                    (pose.rotation.quat, np.array([pose.translation.tx, pose.translation.ty]), score)
                )
            out.append((i, per_class))
    return out


class PosePool:
    """Fan-out helper; pool size 1 runs the same chunk function inline."""

    def __init__(self, dataset, cfg, workers):
        self.workers = workers
        _setup_worker_state(dataset, cfg)
        self._pool = None
        if workers > 1:
            ctx = mp.get_context("fork")
            self._pool = ProcessPoolExecutor(max_workers=workers, mp_context=ctx)

    def search(self, state: RunState, idx, k_cut):
        idx = np.asarray(sorted(int(i) for i in idx))
        z_rows = state.z[idx]
        args_common = ([w for w in state.weights], state.featurizer, state.dtype)
        chunks = np.array_split(idx, self.workers) if self.workers > 1 else [idx]
        tasks = []
        for chunk in chunks:
            if len(chunk) == 0:
                continue
            rows = np.searchsorted(idx, chunk)
            tasks.append(
                (list(chunk), k_cut, args_common[0], args_common[1], z_rows[rows], args_common[2])
            )
        if self._pool is None:
            results = [_hps_chunk(t) for t in tasks]
        else:
            results = list(self._pool.map(_hps_chunk, tasks))
        merged = [item for chunk in results for item in chunk]
        merged.sort(key=lambda pair: pair[0])
        for i, per_class in merged:
            for kk, (quat, t, _score) in enumerate(per_class):
                state.pose_quats[i, kk] = quat
                state.pose_trans[i, kk] = t

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def hps_phase_step(state: RunState, dataset: Dataset, idx, pool: PosePool, schedule):
    if state.phase != PHASE_HPS:
        raise RuntimeError("hps_phase_step called outside the HPS phase")
    k_cut = schedule.band_cut(state.images_seen)
    pool.search(state, idx, k_cut)
    loss, nlls, grads = batch_objective(state, dataset, idx, k_cut)
    apply_gradients(state, idx, grads)
    state.images_seen += len(idx)
    return loss


def sgd_phase_step(state: RunState, dataset: Dataset, idx, k_cut=None):
    if state.phase != PHASE_SGD:
        raise RuntimeError("sgd_phase_step called outside the SGD phase")
    k_cut = int(state.config.k_max) if k_cut is None else k_cut
    loss, nlls, grads = batch_objective(state, dataset, idx, k_cut)
    apply_gradients(state, idx, grads)
    state.images_seen += len(idx)
    return loss


def switch_to_sgd(state: RunState):
    mats = quat_to_matrix(state.pose_quats.reshape(-1, 4))
    state.rot6 = rot6_from_matrix(mats).reshape(state.rot6.shape)
    state.rot6_m[:] = 0.0
    state.rot6_v[:] = 0.0
    state.trans_m[:] = 0.0
    state.trans_v[:] = 0.0
    state.pose_steps[:] = 0
    state.phase = PHASE_SGD


def epoch_order(seed, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xE0C, int(epoch))))
    return rng.permutation(n)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_to_arrays(state: RunState) -> dict:
    cfg_text = serialize_config(state.config)
    arrays = {
        "meta/config": np.frombuffer(cfg_text.encode(), dtype=np.uint8).copy(),
        "meta/counters": np.array(
            [state.images_seen, state.epoch, state.phase], dtype=np.int64
        ),
        "meta/dtype": np.array([0 if state.dtype == np.float32 else 1], dtype=np.int64),
        "featurizer/freqs": state.featurizer.freqs,
        "tables/scores": state.scores,
        "tables/scores_m": state.scores_m,
        "tables/scores_v": state.scores_v,
        "tables/scores_steps": state.scores_steps,
        "tables/z": state.z,
        "tables/z_m": state.z_m,
        "tables/z_v": state.z_v,
        "tables/z_steps": state.z_steps,
        "tables/pose_quats": state.pose_quats,
        "tables/pose_trans": state.pose_trans,
        "tables/rot6": state.rot6,
        "tables/rot6_m": state.rot6_m,
        "tables/rot6_v": state.rot6_v,
        "tables/trans_m": state.trans_m,
        "tables/trans_v": state.trans_v,
        "tables/pose_steps": state.pose_steps,
    }
    for kk, (w, adam) in enumerate(zip(state.weights, state.weight_adam)):
        for name, tensor in w.tensors():
            arrays[f"field{kk}/{name}"] = tensor
            st = adam[name]
            arrays[f"field{kk}/adam_m/{name}"] = st.m
            arrays[f"field{kk}/adam_v/{name}"] = st.v
            arrays[f"field{kk}/adam_t/{name}"] = np.array([st.step], dtype=np.int64)
    return arrays


def save_checkpoint(path, state: RunState):
    save_npz_deterministic(path, state_to_arrays(state))


def load_checkpoint(path) -> RunState:
    from .config import parse_config

    arrays = load_npz(path)
    cfg = parse_config(bytes(arrays["meta/config"]).decode())
    dtype = np.float32 if int(arrays["meta/dtype"][0]) == 0 else np.float64
    featurizer = fd.FourierFeaturizer.from_frequencies(arrays["featurizer/freqs"])
    weights, adams = [], []
    for kk in range(cfg.n_classes):
        w = fd.init_field_weights(
            featurizer.n_features, cfg.conf_dim, cfg.field_width, seed=0, dtype=dtype
        )
        adam = {}
        for name, tensor in w.tensors():
            tensor[:] = arrays[f"field{kk}/{name}"]
            adam[name] = fd.AdamState(
                m=arrays[f"field{kk}/adam_m/{name}"].copy(),
                v=arrays[f"field{kk}/adam_v/{name}"].copy(),
                step=int(arrays[f"field{kk}/adam_t/{name}"][0]),
            )
        weights.append(w)
        adams.append(adam)
    counters = arrays["meta/counters"]
    state = RunState(
        config=cfg,
        featurizer=featurizer,
        weights=weights,
        weight_adam=adams,
        scores=arrays["tables/scores"].copy(),
        scores_m=arrays["tables/scores_m"].copy(),
        scores_v=arrays["tables/scores_v"].copy(),
        scores_steps=arrays["tables/scores_steps"].copy(),
        z=arrays["tables/z"].copy(),
        z_m=arrays["tables/z_m"].copy(),
        z_v=arrays["tables/z_v"].copy(),
        z_steps=arrays["tables/z_steps"].copy(),
        pose_quats=arrays["tables/pose_quats"].copy(),
        pose_trans=arrays["tables/pose_trans"].copy(),
        rot6=arrays["tables/rot6"].copy(),
        rot6_m=arrays["tables/rot6_m"].copy(),
        rot6_v=arrays["tables/rot6_v"].copy(),
        trans_m=arrays["tables/trans_m"].copy(),
        trans_v=arrays["tables/trans_v"].copy(),
        pose_steps=arrays["tables/pose_steps"].copy(),
        images_seen=int(counters[0]),
        epoch=int(counters[1]),
        phase=int(counters[2]),
        dtype=dtype,
    )
    return state


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

def run(cfg: RunConfig, data_dir, out_dir, resume=None, workers=None, dtype=np.float32):
    """Execute init -> HPS phase -> SGD phase, writing checkpoints and logs."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    dataset = Dataset(data_dir)
    workers = resolve_workers(workers)
    if resume is not None:
        state = load_checkpoint(resume)
        if state.config.box_size != dataset.d:
            raise ValueError(
                f"checkpoint box_size {state.config.box_size} does not match dataset D {dataset.d}"
            )
        if serialize_config(state.config) != serialize_config(cfg):
            raise ValueError("checkpoint config does not match the requested config")
    else:
        state = init_run(cfg, dataset, dtype=dtype)

    schedule = ps.HpsSchedule(cfg.k_min, cfg.k_max, hps_threshold(cfg, dataset.n))
    pool = PosePool(dataset, cfg, workers)
    log_lines = []
    log_path = os.path.join(out_dir, "metrics.log")
    if resume is not None and os.path.exists(log_path):
        with open(log_path) as f:
            log_lines = [ln for ln in f.read().splitlines() if ln]
        log_lines = log_lines[: state.epoch]

    def occupancy():
        counts = np.bincount(np.argmax(state.scores, axis=1), minlength=cfg.n_classes)
        return "/".join(str(int(c)) for c in counts)

    def log_epoch(phase_name, mean_nll):
        log_lines.append(f"epoch={state.epoch} phase={phase_name} nll={mean_nll:.6f} occupancy={occupancy()}")
        atomic_write_text(log_path, "\n".join(log_lines) + "\n")

    threshold = hps_threshold(cfg, dataset.n)
    try:
        while state.phase == PHASE_HPS:
            order = epoch_order(cfg.seed, state.epoch, dataset.n)
            total, seen = 0.0, 0
            for start in range(0, dataset.n, cfg.hps_batch_size):
                idx = order[start : start + cfg.hps_batch_size]
                loss = hps_phase_step(state, dataset, idx, pool, schedule)
                total += loss * len(idx)
                seen += len(idx)
                if state.images_seen >= threshold:
                    break
            state.epoch += 1
            log_epoch("hps", total / max(seen, 1))
            if state.images_seen >= threshold:
                switch_to_sgd(state)  # before the checkpoint so resume lands in SGD
            save_checkpoint(os.path.join(out_dir, f"ckpt_{state.epoch:04d}.npz"), state)

        sgd_done = max(0, state.epoch - math.ceil(threshold / dataset.n))
        for _ in range(sgd_done, cfg.sgd_epochs):
            order = epoch_order(cfg.seed, state.epoch, dataset.n)
            total = 0.0
            for start in range(0, dataset.n, cfg.sgd_batch_size):
                idx = order[start : start + cfg.sgd_batch_size]
                loss = sgd_phase_step(state, dataset, idx)
                total += loss * len(idx)
            state.epoch += 1
            log_epoch("sgd", total / dataset.n)
            save_checkpoint(os.path.join(out_dir, f"ckpt_{state.epoch:04d}.npz"), state)
    finally:
        pool.close()

    save_checkpoint(os.path.join(out_dir, "final.npz"), state)
    provenance = {
        "config_hash": config_hash(cfg),
        "data_config_hash": dataset.meta.get("config_hash", ""),
        "epochs": state.epoch,
        "images_seen": state.images_seen,
    }
    atomic_write_text(os.path.join(out_dir, "provenance.txt"), serialize_keyvalues(provenance))
    atomic_write_text(os.path.join(out_dir, "config.cfg"), serialize_config(cfg))
    return state
