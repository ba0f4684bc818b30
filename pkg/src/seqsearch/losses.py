"""Objective terms and the per-experiment composite losses.

Signal terms act on readout magnitudes |s| and are batch means.  RF count
and RF energy come in two flavours: a probability-weighted (expected)
version over the search space, differentiable in the architecture logits,
and the plain value for a concrete sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .population import CSF, GM, WM
from .scheduler import N_RF, SearchSpace, softmax_jacobian_vjp
from .sequence import Sequence

REFERENCE_ENERGY = (math.pi / 2) ** 2 + math.pi ** 2  # 90-180 pair, rad^2


@dataclass(frozen=True)
class LossWeights:
    sig: float = 1.0
    null: float = 0.0
    cont: float = 0.0
    rf_energy: float = 1e-4
    rf_number: float = 1e-3

    def __post_init__(self):
        for name in ("sig", "null", "cont", "rf_energy", "rf_number"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


EXPERIMENT_WEIGHTS = {
    "E1": LossWeights(sig=1.0),
    "E2-sameT1": LossWeights(sig=1.0, cont=30.0),
    "E2-diffT1": LossWeights(sig=1.0, cont=30.0),
    "E3": LossWeights(sig=0.75, null=0.25),
}


def experiment_kind(experiment: str) -> str:
    kind = experiment.split("-")[0]
    if kind not in ("E1", "E2", "E3"):
        raise ValueError(f"unknown experiment {experiment!r}")
    return kind


def default_weights(experiment: str, **overrides) -> LossWeights:
    key = experiment if experiment in EXPERIMENT_WEIGHTS else experiment_kind(experiment)
    key = {"E2": "E2-diffT1"}.get(key, key)
    return replace(EXPERIMENT_WEIGHTS[key], **overrides)


# -- signal terms ------------------------------------------------------------
# Voxels run along the last axis; leading axes (e.g. a grid of candidate
# sequences) broadcast through every term.

def _nonempty(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("empty batch")
    return x


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else v


def loss_sig(mag, m0, grad: bool = False):
    """mean (M0 - |s|)^2"""
    mag, m0 = _nonempty(mag), np.asarray(m0, dtype=float)
    r = m0 - mag
    val = _scalar(np.mean(r * r, axis=-1))
    return (val, -2.0 * r / mag.shape[-1]) if grad else val


def loss_null(mag, grad: bool = False):
    """mean |s|^2"""
    mag = _nonempty(mag)
    val = _scalar(np.mean(mag * mag, axis=-1))
    return (val, 2.0 * mag / mag.shape[-1]) if grad else val


def loss_cont(mag_a, mag_b, grad: bool = False):
    """-mean (|s_A| - |s_B|)^2 with voxels paired by index."""
    a, b = _nonempty(mag_a), _nonempty(mag_b)
    if a.shape != b.shape:
        raise ValueError("contrast terms need equal voxel counts per tissue")
    d = a - b
    val = _scalar(-np.mean(d * d, axis=-1))
    if not grad:
        return val
    ga = -2.0 * d / d.shape[-1]
    return val, ga, -ga


# -- RF penalties ------------------------------------------------------------

def rf_number(seq: Sequence) -> int:
    return seq.n_rf


def rf_energy(seq: Sequence) -> float:
    """Sum of squared flip angles (rad^2)."""
    return float(sum(op.flip ** 2 for op in seq.rf_ops))


def relative_rf_energy(seq: Sequence) -> float:
    """RF energy in percent of a 90-180 pulse pair."""
    return 100.0 * rf_energy(seq) / REFERENCE_ENERGY


def expected_rf_number(space: SearchSpace):
    """Expected RF count under softmax(alpha) and its alpha-gradient."""
    p = space.probs()
    g = np.zeros_like(p)
    g[:, :N_RF] = 1.0
    val = float(np.sum(p[:, :N_RF]))
    return val, np.where(space.mask, softmax_jacobian_vjp(p, g), 0.0)


def expected_rf_energy(space: SearchSpace):
    """Expected sum of squared flips; returns (value, d/dalpha, d/dflip)."""
    p = space.probs()
    sq = space.flip ** 2
    g = np.zeros_like(p)
    g[:, :N_RF] = sq
    val = float(np.sum(p[:, :N_RF] * sq))
    d_alpha = np.where(space.mask, softmax_jacobian_vjp(p, g), 0.0)
    d_flip = 2.0 * p[:, :N_RF] * space.flip
    return val, d_alpha, d_flip


# -- composite -----------------------------------------------------------------

@dataclass
class LossBreakdown:
    terms: dict            # raw (unweighted) values
    weighted: dict
    total: float
    dl_dmag: np.ndarray | None = field(default=None, repr=False)

    def row(self) -> dict:
        out = {f"{k}": v for k, v in self.terms.items()}
        out.update({f"w_{k}": v for k, v in self.weighted.items()})
        out["total"] = self.total
        return out


TERM_NAMES = ("sig", "null", "cont", "rf_energy", "rf_number")


def _require(mask, name):
    if not np.any(mask):
        raise ValueError(f"batch has no {name} voxels")
    return np.flatnonzero(mask)


def composite(experiment: str, mag, tissue, m0, rf_num: float, rf_en: float,
              weights: LossWeights | None = None) -> LossBreakdown:
    """Weighted objective for one experiment.

    E1: sig(all) + penalties.  E2: adds cont(GM, WM), pairing the i-th GM
    with the i-th WM voxel (surplus voxels of the larger group are left
    out).  E3: sig(GM) + sig(WM) + null(CSF) + penalties.
    """
    kind = experiment_kind(experiment)
    w = default_weights(experiment) if weights is None else weights
    mag = np.asarray(mag, dtype=float)
    tissue = np.asarray(tissue)
    m0 = np.asarray(m0, dtype=float)
    grad = np.zeros(np.broadcast_shapes(mag.shape, m0.shape))
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    weighted = dict.fromkeys(TERM_NAMES, 0.0)

    if kind in ("E1", "E2"):
        v, g = loss_sig(mag, m0, grad=True)
        terms["sig"], weighted["sig"] = v, w.sig * v
        grad = grad + w.sig * g
    if kind == "E2":
        ia = _require(tissue == GM, "GM")
        ib = _require(tissue == WM, "WM")
        n = min(len(ia), len(ib))
        ia, ib = ia[:n], ib[:n]
        v, ga, gb = loss_cont(mag[..., ia], mag[..., ib], grad=True)
        terms["cont"], weighted["cont"] = v, w.cont * v
        grad[..., ia] += w.cont * ga
        grad[..., ib] += w.cont * gb
    if kind == "E3":
        v = 0.0
        for code, name in ((GM, "GM"), (WM, "WM")):
            idx = _require(tissue == code, name)
            vt, gt = loss_sig(mag[..., idx], m0[idx], grad=True)
            v = v + vt
            grad[..., idx] += w.sig * gt
        terms["sig"], weighted["sig"] = v, w.sig * v
        idx = _require(tissue == CSF, "CSF")
        vn, gn = loss_null(mag[..., idx], grad=True)
        terms["null"], weighted["null"] = vn, w.null * vn
        grad[..., idx] += w.null * gn

    terms["rf_energy"], weighted["rf_energy"] = rf_en, w.rf_energy * rf_en
    terms["rf_number"], weighted["rf_number"] = rf_num, w.rf_number * rf_num
    total = _scalar(sum(weighted.values()))
    return LossBreakdown(terms, weighted, total, grad)


def evaluate_sequence(experiment: str, seq: Sequence, mag, batch, weights: LossWeights | None = None) -> LossBreakdown:
    """Composite loss of a concrete sequence (integer RF count, actual energy)."""
    return composite(experiment, mag, batch.tissue, batch.m0, rf_number(seq), rf_energy(seq), weights)
