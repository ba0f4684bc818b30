"""Optimizers and the alternating weight/architecture training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bloch import Tape, evolve, pairing_moments, rf_pairing
from .losses import (LossWeights, composite, default_weights, expected_rf_energy,
                     expected_rf_number)
from .population import VoxelBatch, stratified_indices
from .scheduler import (N_CAND, N_RF, SearchSpace, arch_gradients, argmax_path,
                        path_ops, sample_path, save_checkpoint)

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


def _check_finite(grads: dict):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")


@dataclass
class SGD:
    lr: float = 0.01

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")

    def step(self, params: dict, grads: dict):
        """In-place update of every array in ``params`` that has a gradient."""
        _check_finite(grads)
        for k, g in grads.items():
            params[k] -= self.lr * g


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")

    def step(self, params: dict, grads: dict):
        _check_finite(grads)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: a.tolist() for k, a in self.m.items()},
                "v": {k: a.tolist() for k, a in self.v.items()}}


@dataclass
class TrainConfig:
    experiment: str = "E1"
    epochs: int = 1000
    batch: int = 1000
    population: int = 100_000
    seed: int = 0
    weights: dict = field(default_factory=dict)   # loss-weight overrides
    lr_weights: float = 0.01
    lr_arch: float = 0.001
    # iterations per epoch; None means one pass over the population
    iters_per_epoch: int | None = None
    gate_estimator: str = "all"                   # "all" or "active"
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    max_bad_epochs: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 3:
            raise ValueError("batch must hold at least one voxel per tissue")
        if self.batch > self.population:
            raise ValueError("batch must not exceed population")
        if self.gate_estimator not in ("all", "active"):
            raise ValueError(f"unknown gate estimator {self.gate_estimator!r}")

    @property
    def iterations(self) -> int:
        if self.iters_per_epoch is not None:
            return max(1, int(self.iters_per_epoch))
        return max(1, self.population // self.batch)

    def loss_weights(self) -> LossWeights:
        return default_weights(self.experiment, **self.weights)

    def to_dict(self) -> dict:
        return asdict(self)


HISTORY_FIELDS = ("epoch", "sig", "null", "cont", "rf_energy", "rf_number", "total", "n_rf_argmax", "bad_steps")


@dataclass
class TrainResult:
    space: SearchSpace
    history: list
    failed: bool = False
    message: str = ""


def gate_gradients_all(space: SearchSpace, path, tape: Tape, adj_out) -> np.ndarray:
    """dL/dg for every candidate of every layer.

    With the layer output written as sum_j g_j o_j(x), the gradient of gate
    j is the adjoint at the layer output paired with that candidate's output
    on the recorded layer input.
    """
    batch = tape.batch
    g = np.zeros((space.n_layers, N_CAND))
    for layer, active in enumerate(path):
        gm, gz = adj_out[layer]
        m_in, z_in = tape.inputs[layer]
        moments = {}
        for cand in np.flatnonzero(space.mask[layer]):
            flip, phase, idle = space.candidate_op(layer, int(cand))
            if cand == active:
                m, z = tape.outputs[layer]
                g[layer, cand] = np.sum((np.conj(gm) * m).real) + np.sum(gz * z)
            elif flip is None:
                m, z = evolve(m_in, z_in, idle, batch)
                g[layer, cand] = np.sum((np.conj(gm) * m).real) + np.sum(gz * z)
            else:
                if idle not in moments:
                    moments[idle] = pairing_moments(gm, gz, m_in, z_in, batch, idle)
                g[layer, cand] = rf_pairing(moments[idle], flip, phase, batch.b1)
    return g


@dataclass
class StepResult:
    breakdown: object
    weight_grads: dict
    arch_grad: np.ndarray | None
    path: tuple


def compute_step(space: SearchSpace, batch: VoxelBatch, path, experiment: str, weights: LossWeights,
                 gate_estimator: str = "all") -> StepResult:
    """Loss and gradients of one sampled path on one batch (no update)."""
    ops = path_ops(space, path)
    tape = Tape(ops, batch)
    n_exp, dn_dalpha = expected_rf_number(space)
    e_exp, de_dalpha, de_dflip = expected_rf_energy(space)
    br = composite(experiment, tape.magnitude, batch.tissue, batch.m0, n_exp, e_exp, weights)
    g = tape.backward(br.dl_dmag)

    grads = {k: np.zeros_like(v) for k, v in space.params().items()}
    for layer, cand in enumerate(path):
        if cand < N_RF:
            grads["flip"][layer, cand] = g.flip[layer] + weights.rf_energy * de_dflip[layer, cand]
            grads["phase"][layer, cand] = g.phase[layer]
            # steps below the idle floor are undone by project()
            grads["rf_rho"][layer, cand] = g.log_idle[layer]
        else:
            grads["wait_rho"][layer, cand - N_RF] = g.log_idle[layer]

    arch = None
    if not space.frozen_arch:
        if gate_estimator == "all":
            gates = gate_gradients_all(space, path, tape, g.adj_out)
        else:
            gates = g.gate
        arch = arch_gradients(space, path, gates)
        arch = arch + weights.rf_number * dn_dalpha + weights.rf_energy * de_dalpha
    return StepResult(br, grads, arch, tuple(path))


def train(space: SearchSpace, population: VoxelBatch, cfg: TrainConfig, progress=None) -> TrainResult:
    """Alternating optimization; ``space`` is updated in place.

    Every iteration draws a tissue-stratified batch and one path, then
    applies an SGD step to the path's weights and an ADAM step to the
    architecture logits, both from the same forward/backward pass.
    """
    rng = np.random.default_rng(cfg.seed)
    weights = cfg.loss_weights()
    sgd = SGD(cfg.lr_weights)
    adam = Adam(cfg.lr_arch)
    history = []
    bad_run = 0
    for epoch in range(1, cfg.epochs + 1):
        rows, bad = [], 0
        for _ in range(cfg.iterations):
            idx = stratified_indices(population.tissue, cfg.batch, rng)
            batch = population.subset(idx)
            path = sample_path(space, rng)
            with np.errstate(all="ignore"):
                step = compute_step(space, batch, path, cfg.experiment, weights, cfg.gate_estimator)
            total = step.breakdown.total
            try:
                if not math.isfinite(total):
                    raise NonFiniteGradient("non-finite loss")
                _check_finite(step.weight_grads)
                if step.arch_grad is not None:
                    _check_finite({"alpha": step.arch_grad})
            except NonFiniteGradient as exc:
                log.warning("epoch %d: %s; skipping update", epoch, exc)
                bad += 1
                continue
            sgd.step(space.params(), step.weight_grads)
            if step.arch_grad is not None:
                adam.step({"alpha": space.alpha}, {"alpha": step.arch_grad})
            space.project()
            rows.append(step.breakdown.terms | {"total": total})

        if rows:
            row = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
            bad_run = 0
        else:
            row = {k: float("nan") for k in HISTORY_FIELDS[1:7]}
            bad_run += 1
        best = argmax_path(space)
        row = {"epoch": epoch, **row, "n_rf_argmax": sum(c < N_RF for c in best), "bad_steps": bad}
        history.append(row)
        if progress is not None:
            progress(row)
        if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(space, rng, f"{cfg.checkpoint_dir}/ckpt_{epoch:05d}.json", epoch=epoch,
                            adam=adam.state_dict())
        if bad_run > cfg.max_bad_epochs:
            msg = f"aborted after {bad_run} consecutive epochs with non-finite loss"
            log.error(msg)
            return TrainResult(space, history, failed=True, message=msg)
    return TrainResult(space, history)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
