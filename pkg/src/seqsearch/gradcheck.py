"""Finite-difference check of the reverse-mode sequence gradients."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bloch import Tape
from .losses import composite
from .population import sample_population
from .sequence import RF_IDLE_MIN, MAX_RF, RfOp, Sequence, WaitOp

EXPERIMENTS = ("E1", "E2-diffT1", "E3")


def random_sequence(rng: np.random.Generator, n_rf: int | None = None, p_wait: float = 0.3) -> Sequence:
    """1-5 RF pulses with random flips/phases; waits are inserted at random."""
    n_rf = int(rng.integers(1, MAX_RF + 1)) if n_rf is None else n_rf
    ops = []
    for k in range(n_rf):
        ops.append(RfOp(rng.uniform(0.1, math.pi), rng.uniform(-math.pi, math.pi),
                        RF_IDLE_MIN + rng.exponential(10.0)))
        if k < n_rf - 1 and rng.random() < p_wait:
            ops.append(WaitOp(10.0 ** rng.uniform(-1, 2.5)))
    return Sequence(tuple(ops))


def _loss(ops, batch, experiment):
    tape = Tape(ops, batch)
    return composite(experiment, tape.magnitude, batch.tissue, batch.m0, 0.0, 0.0).total


@dataclass
class GradEntry:
    name: str
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-6)
        return abs(self.analytic - self.numeric) / scale


def check_sequence(seq: Sequence, batch, experiment: str = "E1", h: float = 1e-5) -> list[GradEntry]:
    """Compare d loss / d(flip, phase, log idle) against central differences."""
    base = [[op.flip, op.phase, op.idle] if isinstance(op, RfOp) else [None, None, op.idle] for op in seq.ops]
    tape = Tape([tuple(o) for o in base], batch)
    br = composite(experiment, tape.magnitude, batch.tissue, batch.m0, 0.0, 0.0)
    g = tape.backward(br.dl_dmag)
    out = []
    for k, (flip, _, idle) in enumerate(base):
        params = [("log_idle", 2, g.log_idle[k])]
        if flip is not None:
            params = [("flip", 0, g.flip[k]), ("phase", 1, g.phase[k])] + params
        for name, j, analytic in params:
            vals = []
            for sign in (1.0, -1.0):
                ops = [list(o) for o in base]
                if j == 2:
                    ops[k][2] = math.exp(math.log(idle + 1e-3) + sign * h) - 1e-3
                else:
                    ops[k][j] += sign * h
                vals.append(_loss([tuple(o) for o in ops], batch, experiment))
            out.append(GradEntry(f"op{k}.{name}", float(analytic), (vals[0] - vals[1]) / (2 * h)))
    return out


@dataclass
class GradCheckReport:
    n_sequences: int
    entries: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max(e.rel_error for _, e in self.entries)

    def worst(self):
        return max(self.entries, key=lambda t: t[1].rel_error)


def run_gradcheck(n_sequences: int = 20, n_voxels: int = 10, seed: int = 0) -> GradCheckReport:
    """Random sequences x random voxels, cycling through the experiment losses."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(n_sequences)
    for i in range(n_sequences):
        seq = random_sequence(rng)
        batch = sample_population(n_voxels, int(rng.integers(2 ** 31)))
        experiment = EXPERIMENTS[i % len(EXPERIMENTS)]
        rep.entries += [(i, e) for e in check_sequence(seq, batch, experiment)]
    rep.seconds = time.perf_counter() - t0
    return rep
