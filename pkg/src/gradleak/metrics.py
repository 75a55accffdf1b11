"""Reconstruction scoring: matched MSE/PSNR and label accuracy."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, NegativeMse
from .linalg import hungarian

PSNR_CAP = 300.0


def mse(a, b) -> float:
    """``||a - b||_2 / dim``; note the norm is not squared."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths differ: {a.size} vs {b.size}")
    return float(np.linalg.norm(a - b) / a.size)


def psnr(mse_value: float) -> float:
    if mse_value < 0:
        raise NegativeMse(f"mse must be non-negative, got {mse_value}")
    if mse_value == 0:
        return float("inf")
    return float(-10.0 * np.log10(mse_value))


def label_accuracy(recon_labels, truth_labels) -> float:
    truth = list(np.asarray(truth_labels).tolist())
    if not truth:
        return 0.0
    common = Counter(np.asarray(recon_labels).tolist()) & Counter(truth)
    return sum(common.values()) / len(truth)


@dataclass
class MatchedScore:
    pairs: list
    per_pair_mse: list
    per_pair_psnr: list
    mean_mse: float
    mean_psnr: float
    lacc: float
    n_exact: int = 0
    size_mismatch: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_pair": [
                {"recon": r, "truth": t, "mse": m, "psnr": None if np.isinf(p) else p}
                for (r, t), m, p in zip(self.pairs, self.per_pair_mse, self.per_pair_psnr)
            ],
            "mean_mse": self.mean_mse,
            "mean_psnr": self.mean_psnr,
            "lacc": self.lacc,
            "n_exact": self.n_exact,
            "size_mismatch": self.size_mismatch,
        }


def pairwise_mse(recon_inputs, truth_inputs) -> np.ndarray:
    r = np.asarray(recon_inputs, dtype=np.float64)
    t = np.asarray(truth_inputs, dtype=np.float64)
    if r.shape[1] != t.shape[1]:
        raise LengthMismatch("input dimensions differ")
    diff = r[:, None, :] - t[None, :, :]
    return np.linalg.norm(diff, axis=2) / r.shape[1]


def match_and_score(recon, truth) -> MatchedScore:
    """Hungarian matching on pairwise MSE, then per-pair metrics and LAcc.

    Unequal batch sizes are scored on the smaller count and flagged.
    """
    cost = pairwise_mse(recon.inputs, truth.inputs)
    n_r, n_t = cost.shape
    n = max(n_r, n_t)
    padded = np.zeros((n, n))
    padded[:n_r, :n_t] = cost
    pairs = [(r, t) for r, t in hungarian(padded) if r < n_r and t < n_t]
    pairs.sort()
    per_mse = [float(cost[r, t]) for r, t in pairs]
    per_psnr = [psnr(v) for v in per_mse]
    capped = [min(p, PSNR_CAP) for p in per_psnr]
    return MatchedScore(
        pairs=pairs,
        per_pair_mse=per_mse,
        per_pair_psnr=per_psnr,
        mean_mse=float(np.mean(per_mse)) if per_mse else float("nan"),
        mean_psnr=float(np.mean(capped)) if capped else float("nan"),
        lacc=label_accuracy(recon.labels, truth.labels),
        n_exact=sum(1 for p in per_psnr if np.isinf(p)),
        size_mismatch=n_r != n_t,
    )
