"""K-class latent-variable objective: squared residuals per class, stable
log-sum-exp mixture NLL, per-class posteriors, and the class readout.

Residuals are computed over the current band mask and normalized by the mask
size, so the noise scale sigma keeps one meaning while the frequency band
anneals (the unnormalized form would rescale the likelihood mid-run;
sigma_unnorm^2 = sigma^2 * M relates the two conventions).
"""

from __future__ import annotations

import numpy as np


def class_probs(s_row):
    """softmax(s) with max subtraction; positive entries summing to 1."""
    s = np.asarray(s_row, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(s_row):
    s = np.asarray(s_row, dtype=np.float64)
    shifted = s - s.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def residuals(obs_rows, ctf, preds, sigma):
    """r_k = ||obs_k - ctf * pred_k||^2 / (2 sigma^2 M) over the banded coords."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    obs = np.asarray(obs_rows, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    ctf = np.asarray(ctf, dtype=np.float64)
    diff = obs - ctf[None, :] * preds
    m = obs.shape[-1]
    return np.einsum("km,km->k", diff, diff) / (2.0 * sigma * sigma * m)


def mixture_nll(r, s_row):
    """(-logsumexp_k(-r_k + logsoftmax(s)_k), posteriors gamma)."""
    logits = -np.asarray(r, dtype=np.float64) + log_softmax(s_row)
    hi = logits.max()
    w = np.exp(logits - hi)
    total = w.sum()
    nll = -(hi + np.log(total))
    return nll, w / total


def image_nll(obs_rows, ctf, preds, s_row, sigma):
    """Per-image mixture NLL.

    obs_rows: (K, M) observed banded Hartley values, already translated into
    each class's reference frame; preds: (K, M) rendered slices; returns
    (nll, per-class residuals r, per-class posteriors gamma).
    """
    r = residuals(obs_rows, ctf, preds, sigma)
    nll, gamma = mixture_nll(r, s_row)
    return nll, r, gamma


def nll_backward(obs_rows, ctf, preds, s_row, sigma):
    """Gradients of image_nll w.r.t. scores, predictions, and observations.

    d nll / d s = softmax(s) - gamma; d nll / d r_k = gamma_k, chained into
    d r_k / d pred = -ctf * resid / (sigma^2 M) and d r_k / d obs = +resid /
    (sigma^2 M). Pose and field-weight gradients follow by chaining grad_preds
    through the renderer (and grad_obs through the translation phases).
    """
    obs = np.asarray(obs_rows, dtype=np.float64)
    preds_f = np.asarray(preds, dtype=np.float64)
    ctf = np.asarray(ctf, dtype=np.float64)
    r = residuals(obs, ctf, preds_f, sigma)
    nll, gamma = mixture_nll(r, s_row)
    m = obs.shape[-1]
    resid = obs - ctf[None, :] * preds_f
    scale = gamma[:, None] / (sigma * sigma * m)
    grad_preds = -scale * ctf[None, :] * resid
    grad_obs = scale * resid
    grad_s = class_probs(s_row) - gamma
    if not (np.all(np.isfinite(grad_preds)) and np.all(np.isfinite(grad_s))):
        raise FloatingPointError("non-finite gradient in nll_backward")
    return grad_s, grad_preds, grad_obs, r, gamma, nll


def total_loss(nlls, indices=None):
    """Mean per-image NLL, summed in image-index order for determinism."""
    nlls = np.asarray(nlls, dtype=np.float64)
    if nlls.size == 0:
        raise ValueError("total_loss requires a non-empty batch")
    if indices is not None:
        order = np.argsort(np.asarray(indices), kind="stable")
        nlls = nlls[order]
    return float(nlls.sum() / nlls.size)


def predict_class(s_row):
    """argmax of the score row; ties break to the lowest index."""
    return int(np.argmax(np.asarray(s_row)))
