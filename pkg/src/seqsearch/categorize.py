"""Structural classification of designed sequences and per-category statistics.

All angles here are degrees.  Sequences are first standardized: phases are
shifted so the first pulse has phase 0, wrapped to (-180, 180], and negated
when the second pulse's phase is negative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import experiment_kind
from .sequence import RfOp, Sequence, wrap_deg

TOL = 20.0               # flip and phase tolerance
SMALL_FLIP = 20.0        # earlier pulses below this are preparatory
IR_SE_MIN_TI = 100.0     # ms, contrast experiment
IR_MIN_TI = 2700.0       # ms, nulling experiment
CLUSTER_WIDTH = 30.0
CLUSTER_FRACTION = 0.8

LABELS = ("TwoRF-Hahn", "ThreeRF-Hahn", "Hahn-phase180", "Hahn-phase0", "OtherSpinEcho", "IR-SE", "IR-GRE", "Others")


@dataclass(frozen=True)
class StandardizedSequence:
    seq: Sequence
    inverted: bool

    @property
    def flips(self) -> list[float]:
        return self.seq.flips_deg()

    @property
    def phases(self) -> list[float]:
        return self.seq.phases_deg()

    @property
    def refocus_phase(self) -> float:
        """Standardized phase of the last RF pulse."""
        return self.phases[-1]


def standardize(seq: Sequence, invert: bool = True) -> StandardizedSequence:
    rf = seq.rf_ops
    if not rf:
        raise ValueError("cannot standardize a sequence without RF pulses")
    ref = rf[0].phase
    shifted = [wrap_deg(math.degrees(op.phase - ref)) for op in rf]
    flip_sign = invert and len(shifted) > 1 and shifted[1] < 0
    ops, k = [], 0
    for op in seq.ops:
        if isinstance(op, RfOp):
            ph = (-shifted[k] if flip_sign else shifted[k]) + 0.0  # no negative zero
            ops.append(RfOp(op.flip, math.radians(ph), op.idle))
            k += 1
        else:
            ops.append(op)
    return StandardizedSequence(Sequence(tuple(ops), seq.pre_delay), flip_sign)


def _near(x: float, target: float, tol: float = TOL) -> bool:
    return abs(x - target) <= tol


def phase_near_0(ph: float) -> bool:
    return abs(wrap_deg(ph)) <= TOL


def phase_near_180(ph: float) -> bool:
    return abs(wrap_deg(ph)) >= 180.0 - TOL


@dataclass(frozen=True)
class Timing:
    ti: float | None        # inversion to excitation, ms
    te: float | None        # excitation to readout, ms
    readout: float          # first RF to readout, ms


def _spin_echo_tail(flips) -> bool:
    return len(flips) >= 2 and _near(flips[-2], 90.0) and _near(flips[-1], 180.0)


def classify_with_timing(seq: Sequence, experiment: str) -> tuple[str, Timing]:
    std = standardize(seq)
    flips = std.flips
    times = std.seq.rf_times()
    readout = std.seq.time_to_readout
    kind = experiment_kind(experiment)
    n = len(flips)

    if kind == "E3":
        ok_ir = n >= 2 and _near(flips[0], 180.0) and _near(flips[1], 90.0)
        if ok_ir:
            timing = Timing(times[1] - times[0], readout - times[1], readout)
            if timing.ti > IR_MIN_TI:
                if n == 2:
                    return "IR-GRE", timing
                if n == 3 and _near(flips[2], 180.0):
                    return "IR-SE", timing
            return "Others", timing
        return "Others", Timing(None, None, readout)

    # spin-echo families
    timing = Timing(None, readout - times[-2], readout) if n >= 2 else Timing(None, None, readout)
    if kind == "E2" and experiment != "E2-sameT1" and n >= 3 and _near(flips[0], 180.0) \
            and _spin_echo_tail(flips) and all(f < SMALL_FLIP for f in flips[1:-2]):
        ir_timing = Timing(times[-2] - times[0], readout - times[-2], readout)
        if ir_timing.ti > IR_SE_MIN_TI:
            return "IR-SE", ir_timing
    if not (_spin_echo_tail(flips) and all(f < SMALL_FLIP for f in flips[:-2])):
        return "Others", timing
    ph = std.refocus_phase
    if kind == "E1":
        if phase_near_0(ph) or phase_near_180(ph):
            return ("TwoRF-Hahn" if n == 2 else "ThreeRF-Hahn"), timing
        return "OtherSpinEcho", timing
    if phase_near_180(ph):
        return "Hahn-phase180", timing
    if phase_near_0(ph):
        return "Hahn-phase0", timing
    return "OtherSpinEcho", timing


def classify(seq: Sequence, experiment: str) -> str:
    return classify_with_timing(seq, experiment)[0]


# ---------------------------------------------------------------------------
# statistics


def refocus_phases_for_stats(seqs) -> np.ndarray:
    """Last-RF phases arranged for averaging.

    When at least 80% of the (shifted, unflipped) phases lie within 30 deg
    of 0 or of 180, the sign inversion is skipped; for the 180 cluster the
    negative values are moved up by 360 so the cluster is contiguous.
    Otherwise the fully standardized (sign-inverted) phases are used.
    """
    raw = np.array([standardize(s, invert=False).refocus_phase for s in seqs])
    if raw.size == 0:
        return raw
    if np.mean(np.abs(raw) <= CLUSTER_WIDTH) >= CLUSTER_FRACTION:
        return raw
    if np.mean(np.abs(raw) >= 180.0 - CLUSTER_WIDTH) >= CLUSTER_FRACTION:
        return np.where(raw < 0, raw + 360.0, raw)
    return np.array([standardize(s).refocus_phase for s in seqs])


@dataclass
class RunRecord:
    label: str
    seq: Sequence
    signals: dict            # tissue name -> mean |s|
    rel_energy: float
    loss: float = float("nan")
    success: bool = True
    seed: int | None = None


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


@dataclass
class CategoryStats:
    label: str
    count: int
    rate: float
    stats: dict = field(default_factory=dict)    # name -> (mean, std)
    flips: list | None = None                    # per-pulse (mean, std)
    refocus_phase: tuple | None = None


@dataclass
class CategoryReport:
    experiment: str
    n_runs: int
    categories: list

    def rates(self) -> dict:
        return {c.label: c.rate for c in self.categories}

    def rows(self) -> list[dict]:
        out = []
        for c in self.categories:
            row = {"category": c.label, "count": c.count, "occurrence_pct": round(c.rate, 4)}
            for name, (m, s) in c.stats.items():
                row[f"{name}_mean"] = m
                row[f"{name}_std"] = s
            row["flips_deg"] = ("" if c.flips is None else
                                "[" + ", ".join(f"{m:.1f} +/- {s:.1f}" for m, s in c.flips) + "]")
            row["refocus_phase_deg"] = ("" if c.refocus_phase is None else
                                        f"{c.refocus_phase[0]:.1f} +/- {c.refocus_phase[1]:.1f}")
            out.append(row)
        return out

    def write_csv(self, path):
        rows = self.rows()
        fields = []
        for r in rows:
            fields += [k for k in r if k not in fields]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)

    def to_text(self) -> str:
        lines = [f"{self.experiment}: {self.n_runs} runs"]
        for c in self.categories:
            sig = "/".join(f"{c.stats[k][0]:.2f}" for k in ("signal_GM", "signal_WM", "signal_CSF") if k in c.stats)
            parts = [f"{c.label:<14} {c.rate:5.1f}%  n={c.count}"]
            if "rel_energy" in c.stats:
                parts.append(f"signals {sig}")
                parts.append(f"energy {c.stats['rel_energy'][0]:.1f}%")
                parts.append(f"t_readout {c.stats['t_readout_ms'][0]:.1f} ms")
            if c.flips is not None:
                parts.append("flips [" + ", ".join(f"{m:.1f}" for m, _ in c.flips) + "]")
            if c.refocus_phase is not None:
                parts.append(f"phase {c.refocus_phase[0]:.1f}")
            lines.append("  " + "  ".join(parts))
        return "\n".join(lines)


def labels_for(experiment: str) -> tuple:
    kind = experiment_kind(experiment)
    if kind == "E1":
        return ("TwoRF-Hahn", "ThreeRF-Hahn", "OtherSpinEcho", "Others")
    if kind == "E3":
        return ("IR-GRE", "IR-SE", "Others")
    base = ("Hahn-phase180", "Hahn-phase0", "OtherSpinEcho")
    return base + (() if experiment == "E2-sameT1" else ("IR-SE",)) + ("Others",)


def aggregate(runs, experiment: str) -> CategoryReport:
    """Occurrence rates and mean/std of the table columns per category."""
    runs = list(runs)
    if not runs:
        raise ValueError("aggregate needs at least one run")
    order = list(labels_for(experiment))
    order += sorted({r.label for r in runs} - set(order))
    cats = []
    for label in order:
        members = [r for r in runs if r.label == label]
        rate = 100.0 * len(members) / len(runs)
        c = CategoryStats(label, len(members), rate)
        # runs without a final sequence (failed) only count towards the rate
        done = [r for r in members if r.seq is not None]
        if done:
            for tissue in ("GM", "WM", "CSF"):
                c.stats[f"signal_{tissue}"] = _mean_std([r.signals.get(tissue, np.nan) for r in done])
            if experiment_kind(experiment) == "E2":
                c.stats["contrast_GM_WM"] = _mean_std([r.signals["GM"] - r.signals["WM"] for r in done])
            c.stats["rel_energy"] = _mean_std([r.rel_energy for r in done])
            c.stats["t_readout_ms"] = _mean_std([r.seq.time_to_readout for r in done])
            if label != "Others":
                flips = [r.seq.flips_deg() for r in done]
                if len({len(f) for f in flips}) == 1:
                    arr = np.array(flips)
                    c.flips = list(zip(arr.mean(axis=0).tolist(), arr.std(axis=0).tolist()))
                c.refocus_phase = _mean_std(refocus_phases_for_stats([r.seq for r in done]))
        cats.append(c)
    return CategoryReport(experiment, len(runs), cats)
