"""Per-label weighting and the weighted detection loss used in self-training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    """``lambda1``/``lambda2`` weight the two label scores; ``alpha_reg``/``beta_cls`` balance the loss terms."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha_reg: float = 1.0
    beta_cls: float = 0.5
    delta: float = 1.0
    gamma: float = 2.0
    alpha_balance: float = 0.25

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha_reg", "beta_cls", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


def sample_weight(s_cons: float, s_rea: float, w: LossWeights = LossWeights()) -> float:
    if s_cons < 0 or s_rea < 0:
        raise ValueError(f"scores must be non-negative, got s_cons={s_cons}, s_rea={s_rea}")
    return w.lambda1 * s_cons + w.lambda2 * s_rea


def smooth_l1(residual, delta: float = 1.0) -> tuple[float, np.ndarray]:
    """Summed Huber-style loss ``0.5 x^2 / delta`` inside ``|x| < delta``, ``|x| - delta / 2`` outside."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    x = np.asarray(residual, dtype=np.float64)
    ax = np.abs(x)
    inner = ax < delta
    value = np.where(inner, 0.5 * x * x / delta, ax - 0.5 * delta).sum()
    grad = np.where(inner, x / delta, np.sign(x))
    return float(value), grad


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def focal_loss(logits, target: int, gamma: float = 2.0, alpha_balance: float = 0.25) -> tuple[float, np.ndarray]:
    """Softmax focal loss ``-a (1 - p_t)^gamma log p_t`` and its gradient in the logits."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    z = np.asarray(logits, dtype=np.float64)
    p = _softmax(z)
    pt = min(max(p[target], 1e-300), 1.0)
    log_pt = (z[target] - z.max()) - np.log(np.exp(z - z.max()).sum())
    one_m = max(1.0 - pt, 0.0)
    value = -alpha_balance * one_m ** gamma * log_pt
    if gamma == 0:
        dl_dpt = -alpha_balance / pt
    else:
        dl_dpt = -alpha_balance * (-gamma * one_m ** (gamma - 1) * log_pt + one_m ** gamma / pt) \
            if one_m > 0 else 0.0
    onehot = np.zeros_like(p)
    onehot[target] = 1.0
    grad = dl_dpt * pt * (onehot - p)
    return float(value), grad


@dataclass
class WeightedSample:
    """One training sample: optional regression target, class target, and weight ``omega``.

    ``reg_target`` is None for background samples, which then carry only
    a classification term.
    """

    reg_pred: np.ndarray
    logits: np.ndarray
    cls_target: int
    omega: float
    reg_target: np.ndarray | None = None


def total_loss(samples: Sequence[WeightedSample], w: LossWeights = LossWeights()):
    """Mean over samples of ``omega_i * (alpha * L_reg + beta * L_cls)``.

    Returns the loss and per-sample gradients ``(d/d reg_pred, d/d logits)``.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("total_loss needs at least one sample")
    total = 0.0
    grads = []
    for s in samples:
        if s.omega < 0:
            raise ValueError("omega must be non-negative")
        if s.reg_target is not None:
            l_reg, g_reg = smooth_l1(np.asarray(s.reg_pred) - np.asarray(s.reg_target), w.delta)
        else:
            l_reg, g_reg = 0.0, np.zeros_like(np.asarray(s.reg_pred, dtype=np.float64))
        l_cls, g_cls = focal_loss(s.logits, s.cls_target, w.gamma, w.alpha_balance)
        total += s.omega * (w.alpha_reg * l_reg + w.beta_cls * l_cls)
        scale = s.omega / n
        grads.append((scale * w.alpha_reg * g_reg, scale * w.beta_cls * g_cls))
    return total / n, grads
