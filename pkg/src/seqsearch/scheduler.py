"""Search space of the sequence scheduler.

Every layer offers five RF candidates (indices 0-4) and three wait
candidates (indices 5-7); the first layer offers RF candidates only.  Each
candidate owns its weight parameters (flip, phase, log idle time) and each
layer owns one architecture logit per candidate.  A sampled path activates
exactly one candidate per layer and concatenates them into a sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sequence import RF_IDLE_MIN, RfOp, Sequence, WaitOp, prune_small_flips

N_RF = 5
N_WAIT = 3
N_CAND = N_RF + N_WAIT
LOG_EPS = 0.001
RHO_RF_MIN = math.log(RF_IDLE_MIN + LOG_EPS)
WAIT_IDLE_MIN = 1e-6  # ms; waits only need to stay positive
RHO_WAIT_MIN = math.log(WAIT_IDLE_MIN + LOG_EPS)


def idle_from_rho(rho):
    return np.exp(rho) - LOG_EPS


def rho_from_idle(idle):
    return np.log(np.asarray(idle, dtype=float) + LOG_EPS)


def is_rf(cand: int) -> bool:
    return cand < N_RF


@dataclass
class SearchSpace:
    flip: np.ndarray        # (L, 5) radians
    phase: np.ndarray       # (L, 5) radians
    rf_rho: np.ndarray      # (L, 5) log(idle + 0.001)
    wait_rho: np.ndarray    # (L, 3)
    alpha: np.ndarray       # (L, 8) architecture logits
    mask: np.ndarray        # (L, 8) bool, available candidates
    frozen_arch: bool = False

    @property
    def n_layers(self) -> int:
        return self.alpha.shape[0]

    def probs(self) -> np.ndarray:
        """Per-layer softmax over available candidates, shape (L, 8)."""
        a = np.where(self.mask, self.alpha, -np.inf)
        a = a - a.max(axis=1, keepdims=True)
        e = np.where(self.mask, np.exp(a), 0.0)
        return e / e.sum(axis=1, keepdims=True)

    def params(self) -> dict:
        """Weight parameters by name (views, for in-place optimizer updates)."""
        return {"flip": self.flip, "phase": self.phase, "rf_rho": self.rf_rho, "wait_rho": self.wait_rho}

    def project(self):
        """Keep RF idle times at or above the floor, waits positive, flips >= 0."""
        np.maximum(self.rf_rho, RHO_RF_MIN, out=self.rf_rho)
        np.maximum(self.wait_rho, RHO_WAIT_MIN, out=self.wait_rho)
        # a negative flip is the same rotation as |flip| about the opposite axis
        neg = self.flip < 0
        self.flip[neg] *= -1.0
        self.phase[neg] += math.pi

    def copy(self) -> "SearchSpace":
        return SearchSpace(self.flip.copy(), self.phase.copy(), self.rf_rho.copy(), self.wait_rho.copy(),
                           self.alpha.copy(), self.mask.copy(), self.frozen_arch)

    def candidate_op(self, layer: int, cand: int):
        """(flip, phase, idle) of one candidate; flip is None for waits."""
        if is_rf(cand):
            idle = max(float(idle_from_rho(self.rf_rho[layer, cand])), RF_IDLE_MIN)
            return float(self.flip[layer, cand]), float(self.phase[layer, cand]), idle
        return None, None, float(idle_from_rho(self.wait_rho[layer, cand - N_RF]))

    # -- checkpoint -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "flip": self.flip.tolist(), "phase": self.phase.tolist(),
            "rf_rho": self.rf_rho.tolist(), "wait_rho": self.wait_rho.tolist(),
            "alpha": self.alpha.tolist(), "mask": self.mask.tolist(),
            "frozen_arch": self.frozen_arch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        arr = {k: np.array(d[k], dtype=float) for k in ("flip", "phase", "rf_rho", "wait_rho", "alpha")}
        return cls(mask=np.array(d["mask"], dtype=bool), frozen_arch=bool(d.get("frozen_arch", False)), **arr)


def init_search_space(seed, n_layers: int = 5) -> SearchSpace:
    """Random initialization.

    RF candidate k starts with a flip in [36k, 36(k+1)) degrees and a phase
    in [-180, 180); RF idle times start at the 6.2 ms floor; wait candidate
    k starts log-uniform in [10^k, 10^(k+1)] ms; logits ~ N(0, 0.001^2).
    """
    rng = np.random.default_rng(seed)
    L = n_layers
    lo = np.arange(N_RF) * 36.0
    flip = np.radians(rng.uniform(lo, lo + 36.0, size=(L, N_RF)))
    phase = np.radians(rng.uniform(-180.0, 180.0, size=(L, N_RF)))
    rf_rho = np.full((L, N_RF), RHO_RF_MIN)
    expo = rng.uniform(np.arange(N_WAIT), np.arange(N_WAIT) + 1.0, size=(L, N_WAIT))
    wait_rho = rho_from_idle(10.0 ** expo)
    alpha = rng.normal(0.0, 0.001, size=(L, N_CAND))
    mask = np.ones((L, N_CAND), dtype=bool)
    mask[0, N_RF:] = False
    alpha[~mask] = 0.0
    return SearchSpace(flip, phase, rf_rho, wait_rho, alpha, mask)


def fixed_space(seq: Sequence, logit: float = 30.0) -> SearchSpace:
    """Search space whose architecture is pinned to ``seq`` (regression mode).

    One layer per op; the op's candidate slot (RF 0 or wait 0) gets a large
    logit and the architecture is marked frozen.
    """
    L = len(seq.ops)
    sp = init_search_space(0, L)
    sp.alpha[:] = 0.0
    sp.mask[:] = False
    for i, op in enumerate(seq.ops):
        if isinstance(op, RfOp):
            sp.flip[i, 0], sp.phase[i, 0] = op.flip, op.phase
            sp.rf_rho[i, 0] = rho_from_idle(op.idle)
            sp.mask[i, 0] = True
        else:
            sp.wait_rho[i, 0] = rho_from_idle(op.idle)
            sp.mask[i, N_RF] = True
    sp.alpha[sp.mask] = logit
    sp.frozen_arch = True
    return sp


def sample_path(space: SearchSpace, rng: np.random.Generator) -> tuple[int, ...]:
    """One candidate index per layer, drawn from softmax(alpha)."""
    p = space.probs()
    u = rng.random(space.n_layers)
    cdf = np.cumsum(p, axis=1)
    idx = [int(np.searchsorted(cdf[i], u[i] * cdf[i, -1], side="right")) for i in range(space.n_layers)]
    # guard the cdf's last bin against round-off and masked slots
    return tuple(min(i, int(np.flatnonzero(space.mask[l])[-1])) for l, i in enumerate(idx))


def path_ops(space: SearchSpace, path) -> list:
    return [space.candidate_op(layer, cand) for layer, cand in enumerate(path)]


def realize(space: SearchSpace, path) -> Sequence:
    ops = []
    for flip, phase, idle in path_ops(space, path):
        ops.append(WaitOp(idle) if flip is None else RfOp(flip, phase, idle))
    return Sequence(tuple(ops))


def softmax_jacobian_vjp(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """dL/dalpha_i = sum_j g_j p_j (delta_ij - p_i), rowwise."""
    return p * g - p * np.sum(g * p, axis=-1, keepdims=True)


def arch_gradients(space: SearchSpace, path, gate_grads) -> np.ndarray:
    """Architecture-logit gradients from binary-gate gradients.

    ``gate_grads`` is either one value per layer (gradient of the active
    gate only; inactive gates count as zero) or a full (L, 8) array.
    """
    p = space.probs()
    g = np.asarray(gate_grads, dtype=float)
    if g.ndim == 1:
        full = np.zeros_like(p)
        full[np.arange(len(path)), list(path)] = g
        g = full
    return np.where(space.mask, softmax_jacobian_vjp(p, g), 0.0)


def argmax_path(space: SearchSpace) -> tuple[int, ...]:
    """Most probable candidate per layer; ties go to the lowest index."""
    return tuple(int(np.argmax(row)) for row in np.where(space.mask, space.alpha, -np.inf))


def discretize(space: SearchSpace, threshold_deg: float = 3.0) -> Sequence:
    return prune_small_flips(realize(space, argmax_path(space)), math.radians(threshold_deg))


def save_checkpoint(space: SearchSpace, rng: np.random.Generator, path, **extra) -> None:
    payload = {"space": space.to_dict(), "rng": rng.bit_generator.state, **extra}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text())
    rng = np.random.default_rng()
    rng.bit_generator.state = payload.pop("rng")
    return SearchSpace.from_dict(payload.pop("space")), rng, payload
