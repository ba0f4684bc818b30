"""Exhaustive reference search over two-RF sequences.

The sequence is RF(theta1, phase 0) - dt1 - RF(theta2, phi2) - dt2 - readout.
The magnetization after the first pulse and dt1 does not depend on the
second pulse, and the readout is linear in the state entering the second
pulse, so for fixed (theta1, dt1, dt2) the signal of every (theta2, phi2)
follows from three spin averages:

    s = c * P + s2 * exp(2i phi2) * Q - i * sin(a) * exp(i phi2) * R

with a = b1 * theta2, c = cos^2(a/2), s2 = sin^2(a/2) and P, Q, R the
spin means of w*m, w*conj(m) and w*z, where w is the dt2 propagator.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bloch import apply_rf, equilibrium, evolve, simulate, _precession
from .losses import LossWeights, composite, default_weights, evaluate_sequence
from .population import TISSUES, VoxelBatch
from .sequence import RfOp, Sequence, hahn_echo

PARAM_NAMES = ("theta1", "theta2", "phi2", "dt1", "dt2")
# evaluations (combination x voxel) allowed without force, and a rough rate
DEFAULT_BUDGET = 1e10
EVALS_PER_SECOND = 5e7


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be > 0")
        if self.hi < self.lo:
            raise ValueError("grid max below min")

    def values(self) -> np.ndarray:
        """Inclusive of ``lo``; includes ``hi`` when the step divides the range."""
        n = int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return np.round(self.lo + self.step * np.arange(n), 10)

    def __len__(self):
        return len(self.values())

    def coarsen(self, factor: float) -> "Axis":
        return replace(self, step=self.step * factor)


@dataclass(frozen=True)
class GridSpec:
    """Angles in degrees, times in ms; the first RF phase is fixed at 0."""

    theta1: Axis
    theta2: Axis
    phi2: Axis
    dt1: Axis
    dt2: Axis

    def axes(self) -> tuple:
        return tuple(getattr(self, n) for n in PARAM_NAMES)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes())

    @property
    def total(self) -> int:
        return int(np.prod(self.shape))

    def to_dict(self) -> dict:
        return {n: asdict(a) for n, a in zip(PARAM_NAMES, self.axes())}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**{n: Axis(**d[n]) for n in PARAM_NAMES})


FULL_GRIDS = {
    "E1": GridSpec(Axis(85, 95, 1), Axis(170, 180, 1), Axis(0, 180, 1), Axis(6.2, 7.2, 0.1), Axis(6.2, 7.2, 0.1)),
    "E2": GridSpec(Axis(85, 95, 1), Axis(170, 180, 1), Axis(0, 180, 1), Axis(15, 25, 0.5), Axis(15, 25, 0.5)),
    "E3": GridSpec(Axis(170, 180, 1), Axis(85, 95, 1), Axis(0, 180, 5), Axis(2780, 3800, 10), Axis(6.2, 11.2, 1.0)),
}

# Per-axis step multipliers for desk-scale runs.  Flip steps stay at 1 deg
# so the optimum is still resolved to a degree.
DESK_COARSENING = {
    "E1": dict(phi2=5, dt1=5, dt2=5),
    "E2": dict(phi2=5, dt1=5, dt2=5),
    "E3": dict(phi2=3, dt1=3, dt2=5),
}


def grid_preset(experiment: str, desk: bool = True) -> GridSpec:
    kind = experiment.split("-")[0]
    spec = FULL_GRIDS[kind]
    if not desk:
        return spec
    factors = DESK_COARSENING[kind]
    return replace(spec, **{k: getattr(spec, k).coarsen(f) for k, f in factors.items()})


def grid_sequence(theta1, theta2, phi2, dt1, dt2) -> Sequence:
    return Sequence((RfOp.deg(theta1, 0.0, dt1), RfOp.deg(theta2, phi2, dt2)))


def conventional_reference(experiment: str, spec: GridSpec) -> Sequence:
    """Textbook sequence used as a baseline next to the grid optimum."""
    if experiment.startswith("E3"):
        # inversion recovery nulling the nominal CSF T1
        return Sequence((RfOp.deg(180.0, 0.0, 4000.0 * math.log(2)), RfOp.deg(90.0, 0.0, spec.dt2.lo)))
    return hahn_echo(90.0, 180.0, 180.0, spec.dt1.lo, spec.dt2.lo)


class GridBudgetExceeded(RuntimeError):
    pass


def estimate(spec: GridSpec, n_voxels: int) -> dict:
    evals = float(spec.total) * n_voxels
    return {"combinations": spec.total, "voxels": n_voxels, "evaluations": evals,
            "seconds": evals / EVALS_PER_SECOND}


def _second_pulse_moments(m1, z1, batch, dt2):
    w, _ = _precession(batch, dt2)
    return (w * m1).mean(axis=1), (w * np.conj(m1)).mean(axis=1), (w * z1).mean(axis=1)


def two_pulse_signals(P, Q, R, b1, theta2: float, phi2) -> np.ndarray:
    """Complex readout for one flip and an array of phases, shape (n_phi, V)."""
    a = b1 * math.radians(theta2)
    c, s2, sa = np.cos(a / 2) ** 2, np.sin(a / 2) ** 2, np.sin(a)
    ph = np.exp(1j * np.radians(np.asarray(phi2, dtype=float)))[:, None]
    return c * P + s2 * ph * ph * Q - 1j * sa * ph * R


@dataclass
class GridResult:
    experiment: str
    spec: GridSpec
    losses: np.ndarray               # indexed (theta1, theta2, phi2, dt1, dt2)
    top: list                        # ranked rows
    reference: dict
    n_voxels: int
    seconds: float
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def optimum(self) -> dict:
        return self.top[0]

    @property
    def best_loss(self) -> float:
        return self.top[0]["loss"]

    def best_sequence(self) -> Sequence:
        return grid_sequence(*(self.optimum[n] for n in PARAM_NAMES))

    def summary(self) -> dict:
        return {
            "experiment": self.experiment, "spec": self.spec.to_dict(),
            "combinations": self.spec.total, "voxels": self.n_voxels, "seconds": self.seconds,
            "weights": asdict(self.weights), "optimum": self.optimum, "reference": self.reference,
        }

    def write(self, csv_path=None, json_path=None):
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.top[0]))
                w.writeheader()
                w.writerows(self.top)
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.summary(), fh, indent=2)


def describe_tuple(seq: Sequence, batch: VoxelBatch, experiment: str, weights: LossWeights) -> dict:
    """Loss, mean tissue signals and RF energy of a concrete sequence."""
    from .losses import relative_rf_energy

    mag = simulate(seq, batch).magnitude
    br = evaluate_sequence(experiment, seq, mag, batch, weights)
    row = {"loss": br.total}
    for code, name in enumerate(TISSUES):
        sel = batch.tissue == code
        row[f"signal_{name}"] = float(mag[sel].mean()) if np.any(sel) else float("nan")
    row["rel_energy"] = relative_rf_energy(seq)
    return row


def run_grid(spec: GridSpec, batch: VoxelBatch, experiment: str, weights: LossWeights | None = None,
             top_k: int = 10, force: bool = False, budget: float = DEFAULT_BUDGET) -> GridResult:
    """Evaluate every combination of ``spec`` on ``batch``.

    Ties in the minimum go to the lexicographically smallest parameter
    tuple (axes ordered as PARAM_NAMES).
    """
    w = default_weights(experiment) if weights is None else weights
    est = estimate(spec, len(batch))
    if est["evaluations"] > budget and not force:
        raise GridBudgetExceeded(
            f"grid of {est['combinations']:.3g} combinations x {len(batch)} voxels needs about "
            f"{est['seconds'] / 60:.0f} min; pass force to run it anyway")
    t0 = time.perf_counter()
    th1, th2, phi2, dt1, dt2 = (a.values() for a in spec.axes())
    losses = np.empty(spec.shape)
    m_eq, z_eq = equilibrium(batch)
    r2 = [math.radians(t) for t in th2]
    for i, t1 in enumerate(th1):
        f1 = math.radians(t1)
        m_rf, z_rf = apply_rf(m_eq, z_eq, f1, 0.0, batch.b1)
        for j, d1 in enumerate(dt1):
            m1, z1 = evolve(m_rf, z_rf, d1, batch)
            for k, d2 in enumerate(dt2):
                P, Q, R = _second_pulse_moments(m1, z1, batch, d2)
                for n, t2 in enumerate(th2):
                    mag = np.abs(two_pulse_signals(P, Q, R, batch.b1, t2, phi2))
                    br = composite(experiment, mag, batch.tissue, batch.m0, 2, f1 ** 2 + r2[n] ** 2, w)
                    losses[i, n, :, j, k] = br.total
    flat = losses.ravel()
    order = np.argsort(flat, kind="stable")[:top_k]
    top = []
    for rank, f in enumerate(order, start=1):
        idx = np.unravel_index(f, spec.shape)
        params = {name: float(vals[ix]) for name, vals, ix in zip(PARAM_NAMES, (th1, th2, phi2, dt1, dt2), idx)}
        row = {"rank": rank, **params, "grid_loss": float(flat[f])}
        row.update(describe_tuple(grid_sequence(*params.values()), batch, experiment, w))
        top.append(row)
    ref_seq = conventional_reference(experiment, spec)
    reference = {"flips": ref_seq.flips_deg(), "phases": ref_seq.phases_deg(),
                 "idles": [op.idle for op in ref_seq.ops], **describe_tuple(ref_seq, batch, experiment, w)}
    return GridResult(experiment, spec, losses, top, reference, len(batch), time.perf_counter() - t0, w)


def success_threshold(loss_design: float, loss_opt: float, margin: float = 0.05) -> bool:
    """True when the design is within ``margin`` of the optimum (signed-loss safe)."""
    return loss_design <= loss_opt + margin * abs(loss_opt)
