"""Generator perceptual loss (pixel MSE + feature distance + adversarial) and
discriminator loss, with analytic gradients.

Each loss ``f`` has a companion ``f_grad`` returning the gradient with respect
to its tensor argument(s). Probabilities are clamped to [EPS, 1 - EPS] before
taking logs; the gradient is zero where the clamp is active.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

EPS = 1e-7


@dataclass
class LossWeights:
    w_mse: float = 1.0
    w_feat: float = 1e-6
    w_adv: float = 1e-3

    def __post_init__(self):
        if min(self.w_mse, self.w_feat, self.w_adv) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    mse: float
    feat: float
    adv: float
    total: float
    d_loss: float

    def row(self):
        return asdict(self)


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def _check_prob(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return p


def mse_loss(sr, hr) -> float:
    """Sum of squared differences over the rW x rH output grid divided by r^2 W H,
    i.e. the per-pixel mean; then averaged over channels and batch."""
    _check_same(sr, hr)
    d = np.asarray(sr, dtype=np.float64) - np.asarray(hr, dtype=np.float64)
    return float(np.mean(d * d))


def mse_loss_grad(sr, hr):
    _check_same(sr, hr)
    return (2.0 / np.size(sr)) * (np.asarray(sr) - np.asarray(hr))


def feat_loss(phi_sr, phi_hr) -> float:
    """Per item: sum over (x, y, channel) of squared feature differences / (Wj Hj);
    averaged over the batch."""
    _check_same(phi_sr, phi_hr)
    b, hj, wj = np.shape(phi_sr)[:3]
    d = np.asarray(phi_sr, dtype=np.float64) - np.asarray(phi_hr, dtype=np.float64)
    return float(np.sum(d * d) / (wj * hj * b))


def feat_loss_grad(phi_sr, phi_hr):
    _check_same(phi_sr, phi_hr)
    b, hj, wj = np.shape(phi_sr)[:3]
    return (2.0 / (wj * hj * b)) * (np.asarray(phi_sr) - np.asarray(phi_hr))


def adv_loss_g(d_fake) -> float:
    p = np.clip(_check_prob(d_fake), EPS, 1 - EPS)
    return float(np.mean(-np.log(p)))


def adv_loss_g_grad(d_fake):
    raw = _check_prob(d_fake)
    p = np.clip(raw, EPS, 1 - EPS)
    active = (raw > EPS) & (raw < 1 - EPS)
    return np.where(active, -1.0 / (p * p.size), 0.0)


def d_loss(d_real, d_fake) -> float:
    pr = np.clip(_check_prob(d_real), EPS, 1 - EPS)
    pf = np.clip(_check_prob(d_fake), EPS, 1 - EPS)
    _check_same(pr, pf)
    return float(np.mean(-np.log(pr) - np.log1p(-pf)))


def d_loss_grad(d_real, d_fake):
    """Returns (d/d d_real, d/d d_fake)."""
    rr, rf = _check_prob(d_real), _check_prob(d_fake)
    pr, pf = np.clip(rr, EPS, 1 - EPS), np.clip(rf, EPS, 1 - EPS)
    n = pr.size
    gr = np.where((rr > EPS) & (rr < 1 - EPS), -1.0 / (pr * n), 0.0)
    gf = np.where((rf > EPS) & (rf < 1 - EPS), 1.0 / ((1 - pf) * n), 0.0)
    return gr, gf


def total_g_loss(mse: float, feat: float, adv: float, weights: LossWeights) -> float:
    """Weighted sum of batch-averaged components."""
    return weights.w_mse * mse + weights.w_feat * feat + weights.w_adv * adv


class LossLog:
    """Appends one CSV row per training step: step, mse, feat, adv, total, d_loss."""

    columns = ["step"] + [f.name for f in fields(LossBreakdown)]

    def __init__(self, path, resume=False):
        self.path = os.fspath(path)
        if not resume or not os.path.exists(self.path):
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, step: int, losses: LossBreakdown):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step] + [repr(float(v)) for v in asdict(losses).values()])

    @staticmethod
    def read(path):
        with open(path, newline="") as fh:
            return [
                {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)
            ]
