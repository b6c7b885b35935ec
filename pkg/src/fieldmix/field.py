"""Conformation-conditioned neural field over 3D frequency coordinates.

A Fourier featurization feeds a small residual MLP that outputs one Hartley
coefficient per coordinate. Forward, exact reverse-mode gradients (weights,
conformation, input coordinates), and Adam are hand-rolled so the whole
optimizer is dependency-free and testable against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_RESIDUAL_BLOCKS = 3


class FourierFeaturizer:
    """Frozen random base frequencies; coords (B, 3) -> features (B, 2*n)."""

    def __init__(self, n_frequencies=64, sigma=0.5, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xFEA7)))
        self.freqs = rng.normal(0.0, sigma, size=(n_frequencies, 3))
        self.n_features = 2 * n_frequencies

    @classmethod
    def from_frequencies(cls, freqs):
        obj = cls.__new__(cls)
        obj.freqs = np.asarray(freqs, dtype=np.float64)
        obj.n_features = 2 * obj.freqs.shape[0]
        return obj

    def featurize(self, coords):
        """concat(cos(2 pi B k), sin(2 pi B k)); per-sample norm^2 = n_frequencies."""
        ang = 2 * np.pi * np.asarray(coords) @ self.freqs.T.astype(np.asarray(coords).dtype)
        return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)

    def featurize_backward(self, coords, grad_feat):
        """Chain d(features)/d(coords) onto grad_feat -> (B, 3)."""
        coords = np.asarray(coords)
        b = self.freqs.shape[0]
        ang = 2 * np.pi * coords @ self.freqs.T.astype(coords.dtype)
        d_ang = -np.sin(ang) * grad_feat[..., :b] + np.cos(ang) * grad_feat[..., b:]
        return 2 * np.pi * d_ang @ self.freqs.astype(coords.dtype)


@dataclass
class FieldWeights:
    """Dense parameters: input embed, residual blocks, scalar output head."""

    w_in: np.ndarray
    b_in: np.ndarray
    w_blocks: list
    b_blocks: list
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def width(self):
        return self.w_in.shape[1]

    @property
    def latent_dim(self):
        return self.w_in.shape[0] - self._n_feat

    def __post_init__(self):
        if not hasattr(self, "_n_feat") or self._n_feat is None:
            self._n_feat = self.w_in.shape[0]  # loaders overwrite when d > 0

    def tensors(self):
        """Flat (name, array) view in a fixed order; arrays are live references."""
        out = [("w_in", self.w_in), ("b_in", self.b_in)]
        for i, (w, b) in enumerate(zip(self.w_blocks, self.b_blocks)):
            out.append((f"w_block{i}", w))
            out.append((f"b_block{i}", b))
        out.append(("w_out", self.w_out))
        out.append(("b_out", self.b_out))
        return out

    def copy(self):
        fw = FieldWeights(
            self.w_in.copy(),
            self.b_in.copy(),
            [w.copy() for w in self.w_blocks],
            [b.copy() for b in self.b_blocks],
            self.w_out.copy(),
            self.b_out.copy(),
        )
        fw._n_feat = self._n_feat
        return fw

    def astype(self, dtype):
        fw = FieldWeights(
            self.w_in.astype(dtype),
            self.b_in.astype(dtype),
            [w.astype(dtype) for w in self.w_blocks],
            [b.astype(dtype) for b in self.b_blocks],
            self.w_out.astype(dtype),
            self.b_out.astype(dtype),
        )
        fw._n_feat = self._n_feat
        return fw


def init_field_weights(n_features, latent_dim, width=128, seed=0, dtype=np.float32):
    """Fan-in uniform init, seeded; latent_dim may be 0 (static volume model)."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x0F1E)))

    def linear(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = rng.uniform(-bound, bound, size=(n_out,))
        return w.astype(dtype), b.astype(dtype)

    w_in, b_in = linear(n_features + latent_dim, width)
    w_blocks, b_blocks = [], []
    for _ in range(N_RESIDUAL_BLOCKS):
        w, b = linear(width, width)
        w_blocks.append(w)
        b_blocks.append(b)
    w_out, b_out = linear(width, 1)
    fw = FieldWeights(w_in, b_in, w_blocks, b_blocks, w_out, b_out)
    fw._n_feat = n_features
    return fw


def zero_grads_like(weights: FieldWeights) -> FieldWeights:
    fw = FieldWeights(
        np.zeros_like(weights.w_in),
        np.zeros_like(weights.b_in),
        [np.zeros_like(w) for w in weights.w_blocks],
        [np.zeros_like(b) for b in weights.b_blocks],
        np.zeros_like(weights.w_out),
        np.zeros_like(weights.b_out),
    )
    fw._n_feat = weights._n_feat
    return fw


def field_forward(weights: FieldWeights, feat, z=None, tape=None):
    """Residual-MLP forward: h_{l+1} = h_l + relu(W_l h_l + b_l).

    feat is (B, n_features); z is either None (latent_dim 0), a (d,) vector
    shared by the batch, or a (B, d) array. Returns (B,) Hartley values.
    If `tape` is a dict it is filled with intermediates for field_backward.
    """
    feat = np.asarray(feat)
    if z is None or (hasattr(z, "size") and np.asarray(z).size == 0):
        x = feat
    else:
        z = np.asarray(z, dtype=feat.dtype)
        if z.ndim == 1:
            z = np.broadcast_to(z, (feat.shape[0], z.shape[0]))
        x = np.concatenate([feat, z], axis=-1)
    if x.shape[-1] != weights.w_in.shape[0]:
        raise ValueError(
            f"input width {x.shape[-1]} does not match embed layer {weights.w_in.shape[0]}"
        )
    h = x @ weights.w_in + weights.b_in
    hs = [h]
    masks = []
    for w, b in zip(weights.w_blocks, weights.b_blocks):
        pre = h @ w + b
        mask = pre > 0
        h = h + pre * mask
        hs.append(h)
        masks.append(mask)
    out = (h @ weights.w_out + weights.b_out)[..., 0]
    if tape is not None:
        tape.update(x=x, hs=hs, masks=masks)
    return out


def field_backward(weights: FieldWeights, tape, upstream):
    """Exact reverse-mode grads of sum(upstream * output).

    Returns (grad_weights, grad_z, grad_feat) where grad_z is (B, d) per-row
    (None when latent_dim is 0) and grad_feat is (B, n_features).
    """
    x, hs, masks = tape["x"], tape["hs"], tape["masks"]
    up = np.asarray(upstream, dtype=x.dtype)[:, None]
    g = zero_grads_like(weights)
    h_last = hs[-1]
    g.w_out[:] = h_last.T @ up
    g.b_out[:] = up.sum(axis=0)
    dh = up @ weights.w_out.T
    for i in reversed(range(len(weights.w_blocks))):
        dpre = dh * masks[i]
        g.w_blocks[i][:] = hs[i].T @ dpre
        g.b_blocks[i][:] = dpre.sum(axis=0)
        dh = dh + dpre @ weights.w_blocks[i].T
    g.w_in[:] = x.T @ dh
    g.b_in[:] = dh.sum(axis=0)
    dx = dh @ weights.w_in.T
    n_feat = weights._n_feat if weights._n_feat is not None else x.shape[1]
    grad_feat = dx[:, :n_feat]
    grad_z = dx[:, n_feat:] if x.shape[1] > n_feat else None
    return g, grad_z, grad_feat


def render_slice(weights, featurizer, z, coords, dtype=None):
    """Field evaluated on banded slice coordinates -> full D x D Hartley image.

    Masked-out lattice entries are zero.
    """
    vals = render_banded(weights, featurizer, z, coords.coords, dtype=dtype)
    out = np.zeros((coords.d, coords.d), dtype=vals.dtype)
    out[coords.mask] = vals
    return out


def render_banded(weights, featurizer, z, coords_xyz, dtype=None, tape=None):
    coords_xyz = np.asarray(coords_xyz)
    if dtype is not None:
        coords_xyz = coords_xyz.astype(dtype)
    feat = featurizer.featurize(coords_xyz)
    return field_forward(weights, feat, z, tape=tape)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments for one tensor (or tensor table)."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(param, grad, state: AdamState, lr):
    """One in-place Adam update; raises on non-finite gradients."""
    grad = np.asarray(grad)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient in adam_step")
    state.step += 1
    state.m[:] = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v[:] = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    param -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.dtype)
    return param, state


def adam_step_rows(param, grad, m, v, steps, rows, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam on a table restricted to `rows`, with per-row step counters."""
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient in adam_step_rows")
    steps[rows] += 1
    t = steps[rows].reshape((-1,) + (1,) * (param.ndim - 1))
    m[rows] = beta1 * m[rows] + (1 - beta1) * grad
    v[rows] = beta2 * v[rows] + (1 - beta2) * grad * grad
    mhat = m[rows] / (1 - beta1**t)
    vhat = v[rows] / (1 - beta2**t)
    param[rows] -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)
