"""Probability primitives and the Adam optimizer.

All arithmetic is done in 64-bit floats.  Entropies and divergences are in
nats (natural log); probabilities inside logs are clamped to >= 1e-12 so
saturated gate distributions keep every divergence finite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericFault

LOG_CLAMP = 1e-12
SIMPLEX_TOL = 1e-9


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector.

    Uses max-subtraction, so any finite input (including entries around
    1e6 or larger) maps onto the simplex without overflow.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax expects a non-empty 1-D vector")
    if not np.isfinite(v).all():
        raise ValueError("softmax input contains a non-finite entry")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a 2-D array (no validation; hot path)."""
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: float) -> float:
    """Logistic function, stable on both tails."""
    if z >= 0.0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def bce_with_logit(z: float, label: int) -> float:
    """Binary cross-entropy from the logit, in the overflow-safe form
    log(1 + exp(-|z|)) + max(z, 0) - z * label."""
    return float(np.log1p(np.exp(-abs(z))) + max(z, 0.0) - z * label)


def binary_entropy(p: float) -> float:
    """Entropy -p ln p - (1-p) ln(1-p) in nats, with 0 ln 0 = 0.

    Result lies in [0, ln 2]; maximized at p = 0.5.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of [0, 1]: {p}")
    h = 0.0
    if p > 0.0:
        h -= p * np.log(p)
    if p < 1.0:
        h -= (1.0 - p) * np.log(1.0 - p)
    return float(h)


def _check_simplex(p: np.ndarray, name: str) -> None:
    if np.any(p < -SIMPLEX_TOL) or np.any(p > 1.0 + SIMPLEX_TOL):
        raise ValueError(f"{name} has entries outside [0, 1]")
    if abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} does not sum to 1 (got {p.sum()!r})")


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence between two distributions, in nats.

    Symmetric by construction, zero iff p equals q, and bounded by ln 2.
    Inputs must lie on the simplex within 1e-9.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    m = 0.5 * (p + q)
    log_m = np.log(np.maximum(m, LOG_CLAMP))
    kl_pm = np.sum(p * (np.log(np.maximum(p, LOG_CLAMP)) - log_m))
    kl_qm = np.sum(q * (np.log(np.maximum(q, LOG_CLAMP)) - log_m))
    return float(0.5 * kl_pm + 0.5 * kl_qm)


def js_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row JS divergence for two (N, C) arrays of distributions.

    Hot-path variant without simplex validation; rows are assumed to come
    straight out of a softmax.
    """
    m = 0.5 * (p + q)
    log_m = np.log(np.maximum(m, LOG_CLAMP))
    kl_pm = np.sum(p * (np.log(np.maximum(p, LOG_CLAMP)) - log_m), axis=1)
    kl_qm = np.sum(q * (np.log(np.maximum(q, LOG_CLAMP)) - log_m), axis=1)
    return 0.5 * kl_pm + 0.5 * kl_qm


@dataclass(frozen=True)
class AdamState:
    """Optimizer state: step count, both moment vectors, hyperparameters.

    Weight decay is decoupled: it is applied straight to the parameters
    and never enters the moment estimates.
    """

    step: int
    m: np.ndarray
    v: np.ndarray
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, n_params: int, learning_rate: float, *, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8,
             weight_decay: float = 0.0) -> "AdamState":
        return cls(
            step=0,
            m=np.zeros(n_params, dtype=np.float64),
            v=np.zeros(n_params, dtype=np.float64),
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            weight_decay=weight_decay,
        )


def adam_step(params: np.ndarray, grads: np.ndarray,
              state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Pure: returns fresh parameter and state arrays.  Deterministic, so two
    calls from the same state are bitwise identical.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}")
    finite = np.isfinite(grads)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise NumericFault(f"non-finite gradient at index {bad}")

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    lr = state.learning_rate
    new_params = (params
                  - lr * state.weight_decay * params
                  - lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return new_params, replace(state, step=t, m=m, v=v)
