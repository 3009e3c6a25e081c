"""Gaussian mixture output head for 2-D position regression.

Raw network outputs are laid out as ``[K weight logits | 2K means | 2K
variance pre-activations]``; means and variances are mixture-major, i.e.
``(mu_1x, mu_1y, mu_2x, ...)``. All functions accept any number of leading
batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VARIANCE_FLOOR = 1e-6
LOG_2PI = float(np.log(2 * np.pi))
DIM = 2


def output_units(n_mixtures: int) -> int:
    return (1 + 2 * DIM) * n_mixtures


def n_mixtures_for(units: int) -> int:
    k, rem = divmod(units, 1 + 2 * DIM)
    if rem or k < 1:
        raise ValueError(f"{units} raw outputs is not 5K for any K >= 1")
    return k


@dataclass(frozen=True)
class MdnOutput:
    weights: np.ndarray  # (..., K)
    means: np.ndarray  # (..., K, 2)
    variances: np.ndarray  # (..., K, 2)
    log_weights: np.ndarray  # (..., K), exact log of weights even when they underflow


@dataclass(frozen=True)
class MdnPrediction:
    mean: np.ndarray  # (..., 2)
    data_variance: np.ndarray  # (..., 2)
    chosen_mixture: np.ndarray  # (...)
    chosen_weight: np.ndarray  # (...)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _split(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    raw = np.asarray(raw, dtype=np.float64)
    k = n_mixtures_for(raw.shape[-1])
    lead = raw.shape[:-1]
    logits = raw[..., :k]
    mu = raw[..., k : k + DIM * k].reshape(*lead, k, DIM)
    pre_var = raw[..., k + DIM * k :].reshape(*lead, k, DIM)
    return logits, mu, pre_var, k


def constrain(raw: np.ndarray, variance_floor: float = VARIANCE_FLOOR) -> MdnOutput:
    """Softmax weights, identity means, softplus variances plus a floor."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw mixture outputs contain non-finite values")
    logits, mu, pre_var, _ = _split(raw)
    log_w = _log_softmax(logits)
    return MdnOutput(np.exp(log_w), mu.copy(), softplus(pre_var) + variance_floor, log_w)


def component_log_density(output: MdnOutput, target: np.ndarray) -> np.ndarray:
    """``log N(target; mu_k, diag(var_k))`` for every mixture, shape (..., K)."""
    diff = np.asarray(target, dtype=np.float64)[..., None, :] - output.means
    return -0.5 * np.sum(np.log(2 * np.pi * output.variances) + diff**2 / output.variances, axis=-1)


def nll_loss(output: MdnOutput, target: np.ndarray) -> np.ndarray:
    """Per-sample negative log-likelihood, evaluated with log-sum-exp."""
    joint = output.log_weights + component_log_density(output, target)
    top = joint.max(axis=-1)
    return -(top + np.log(np.exp(joint - top[..., None]).sum(axis=-1)))


def nll_and_grad(
    raw: np.ndarray, targets: np.ndarray, variance_floor: float = VARIANCE_FLOOR
) -> tuple[float, np.ndarray]:
    """Batch-mean NLL of ``(B, 5K)`` raw outputs and its gradient w.r.t. ``raw``."""
    raw = np.asarray(raw, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    batch = raw.shape[0]
    logits, _, pre_var, k = _split(raw)
    out = constrain(raw, variance_floor)
    joint = out.log_weights + component_log_density(out, targets)
    top = joint.max(axis=-1, keepdims=True)
    log_norm = top + np.log(np.exp(joint - top).sum(axis=-1, keepdims=True))
    loss = -log_norm[:, 0]
    resp = np.exp(joint - log_norm)  # posterior responsibility of each mixture

    diff = targets[:, None, :] - out.means
    var = out.variances
    g_logits = out.weights - resp
    g_mu = -resp[..., None] * diff / var
    g_var = 0.5 * resp[..., None] * (1.0 / var - diff**2 / var**2)
    g_pre = g_var * sigmoid(pre_var)
    grad = np.concatenate(
        [g_logits, g_mu.reshape(batch, DIM * k), g_pre.reshape(batch, DIM * k)], axis=1
    )
    return float(loss.mean()), grad / batch


def predict(output: MdnOutput) -> MdnPrediction:
    """Mean and variance of the highest-weight mixture (lowest index on ties)."""
    idx = np.argmax(output.log_weights, axis=-1)
    mean = np.take_along_axis(output.means, idx[..., None, None], axis=-2)[..., 0, :]
    var = np.take_along_axis(output.variances, idx[..., None, None], axis=-2)[..., 0, :]
    weight = np.take_along_axis(output.weights, idx[..., None], axis=-1)[..., 0]
    return MdnPrediction(mean, var, idx, weight)
