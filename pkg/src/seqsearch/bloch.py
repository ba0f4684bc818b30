"""Differentiable Bloch simulation of instantaneous-RF pulse sequences.

Magnetization is stored per spin as a complex transverse part
``m = Mx + i My`` and a real longitudinal part ``z``, both of shape
``(voxels, spins)``.  RF pulses are instantaneous rotations; relaxation and
off-resonance precession act during idle periods.

Gradients are computed by reverse accumulation over a recorded tape.  For
a scalar loss L, the adjoint of the transverse part is carried as the
complex number ``dL/dMx + i dL/dMy``; a linear map ``m' = w m`` then pulls
the adjoint back as ``conj(w) * g``.

Rotation convention: phase 0 rotates about +x with the matrix
[[1,0,0],[0,c,-s],[0,s,c]], so a 90 degree pulse takes +z to -y.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .population import TISSUES, VoxelBatch
from .sequence import RfOp, Sequence, check

LOG_EPS = 0.001  # ms added before taking the log of an idle time
_TWO_PI_MS = 2e-3 * np.pi  # 2*pi * (ms -> s)


def equilibrium(batch: VoxelBatch, n_spins: int | None = None):
    n_spins = batch.offsets.shape[1] if n_spins is None else n_spins
    m = np.zeros((len(batch), n_spins), dtype=complex)
    z = np.repeat(batch.m0[:, None], n_spins, axis=1).astype(float)
    return m, z


def _rf_angles(flip, b1):
    alpha = np.asarray(b1, dtype=float) * flip
    return np.cos(alpha)[:, None], np.sin(alpha)[:, None]


def apply_rf(m, z, flip: float, phase: float, b1):
    """Rotate by ``b1*flip`` about the transverse axis at azimuth ``phase``.

    ``b1`` holds one scale per voxel (or a scalar).
    """
    b1 = np.broadcast_to(np.asarray(b1, dtype=float), (m.shape[0],))
    ca, sa = _rf_angles(flip, b1)
    e = np.exp(-1j * phase)
    mr = e * m
    x1, y1 = mr.real, mr.imag
    y2 = ca * y1 - sa * z
    z2 = sa * y1 + ca * z
    return np.conj(e) * (x1 + 1j * y2), z2


_CACHE_SIZE = 16
_CACHE_MAX_BYTES = 64 << 20


def _precession(batch: VoxelBatch, dt: float):
    """Transverse propagator ``w`` (V, S) and longitudinal decay (V, 1) for ``dt`` ms.

    Results are memoized per batch, since path candidates often share idle
    times (e.g. the RF floor).
    """
    cache = batch.cache
    hit = cache.get(dt)
    if hit is not None:
        return hit
    e2 = np.exp(-dt / batch.t2)[:, None]
    e1 = np.exp(-dt / batch.t1)[:, None]
    ang = _TWO_PI_MS * dt * batch.offsets
    w = np.empty(ang.shape, dtype=complex)
    w.real = e2 * np.cos(ang)
    w.imag = e2 * -np.sin(ang)
    if w.nbytes <= _CACHE_MAX_BYTES:
        if len(cache) >= _CACHE_SIZE:
            cache.clear()
        cache[dt] = (w, e1)
    return w, e1


def evolve(m, z, dt: float, batch: VoxelBatch):
    """Free relaxation and precession for ``dt`` ms."""
    w, e1 = _precession(batch, dt)
    m0 = batch.m0[:, None]
    return w * m, m0 + (z - m0) * e1


def readout(m) -> np.ndarray:
    """Complex voxel signal: mean transverse magnetization over spins."""
    return m.mean(axis=1)


def op_params(seq: Sequence):
    """(flip, phase, idle) per op; flip and phase are None for waits."""
    out = []
    for op in seq.ops:
        if isinstance(op, RfOp):
            out.append((op.flip, op.phase, op.idle))
        else:
            out.append((None, None, op.idle))
    return out


@dataclass
class Trajectory:
    """Spin-averaged magnetization sampled in time for each voxel."""

    t: np.ndarray          # (T,) ms from the first RF pulse
    mxy: np.ndarray        # (T, V) complex
    mz: np.ndarray         # (T, V)

    def to_csv(self, path, batch: VoxelBatch):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ms", "voxel_id", "tissue", "Mx", "My", "Mz", "abs_Mxy"])
            for k, t in enumerate(self.t):
                for v in range(self.mxy.shape[1]):
                    c = self.mxy[k, v]
                    w.writerow([f"{t:.6g}", v, TISSUES[batch.tissue[v]],
                                f"{c.real:.8g}", f"{c.imag:.8g}", f"{self.mz[k, v]:.8g}", f"{abs(c):.8g}"])


@dataclass
class Readout:
    signal: np.ndarray     # complex, per voxel
    trajectory: Trajectory | None = None

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.signal)


def simulate(seq: Sequence, batch: VoxelBatch, sample_dt: float | None = None, validate: bool = True) -> Readout:
    """Run the sequence from equilibrium and read out at the end.

    With ``sample_dt`` the spin-averaged magnetization is also sampled every
    ``sample_dt`` ms (plus just after each RF pulse and at the readout).
    """
    if validate:
        check(seq)
    m, z = equilibrium(batch)
    ts, ms, zs = [], [], []

    def record(t, mm, zz):
        ts.append(t)
        ms.append(mm.mean(axis=1))
        zs.append(zz.mean(axis=1))

    t0 = 0.0
    if sample_dt is not None:
        record(0.0, m, z)
    for flip, phase, idle in op_params(seq):
        if flip is not None:
            m, z = apply_rf(m, z, flip, phase, batch.b1)
        if sample_dt is not None:
            record(t0, m, z)
            for tau in np.arange(sample_dt, idle, sample_dt):
                record(t0 + tau, *evolve(m, z, tau, batch))
        m, z = evolve(m, z, idle, batch)
        t0 += idle
    traj = None
    if sample_dt is not None:
        record(t0, m, z)
        traj = Trajectory(np.array(ts), np.array(ms), np.array(zs))
    return Readout(readout(m), traj)


# ---------------------------------------------------------------------------
# reverse mode


@dataclass
class Grads:
    """Loss gradients per op (zeros where a parameter does not exist)."""

    flip: np.ndarray
    phase: np.ndarray
    idle: np.ndarray
    log_idle: np.ndarray
    gate: np.ndarray       # <adjoint, state> at each op's output
    adj_out: list = field(default_factory=list, repr=False)


class Tape:
    """Forward pass that keeps what the backward pass needs.

    ``ops`` is a list of ``(flip, phase, idle)`` tuples; ``flip is None``
    marks a wait.  Inputs to each op are retained (``inputs[k]``) so that
    callers can evaluate alternative ops on the same input state.
    """

    def __init__(self, ops, batch: VoxelBatch):
        self.ops = list(ops)
        self.batch = batch
        self.inputs = []
        self._mid = []
        self.outputs = []
        m, z = equilibrium(batch)
        for flip, phase, idle in self.ops:
            self.inputs.append((m, z))
            if flip is not None:
                m, z = apply_rf(m, z, flip, phase, batch.b1)
            self._mid.append((m, z))
            m, z = evolve(m, z, idle, batch)
            self.outputs.append((m, z))
        self.signal = readout(m)

    @classmethod
    def from_sequence(cls, seq: Sequence, batch: VoxelBatch) -> "Tape":
        return cls(op_params(check(seq)), batch)

    @property
    def magnitude(self):
        return np.abs(self.signal)

    def backward(self, dl_dmag) -> Grads:
        """Pull ``dL/d|s|`` (one value per voxel) back to every op parameter."""
        batch = self.batch
        n = len(self.ops)
        g_flip, g_phase, g_idle, g_gate = (np.zeros(n) for _ in range(4))
        adj_out = [None] * n

        s = self.signal
        mag = np.abs(s)
        unit = np.divide(s, mag, out=np.zeros_like(s), where=mag > 0)
        n_spins = self.outputs[-1][0].shape[1] if n else 1
        gm = np.repeat((np.asarray(dl_dmag, float) * unit / n_spins)[:, None], n_spins, axis=1)
        gz = np.zeros(gm.shape)

        m0 = batch.m0[:, None]
        inv_t2 = (1.0 / batch.t2)[:, None]
        inv_t1 = (1.0 / batch.t1)[:, None]
        psi_dot = -_TWO_PI_MS * batch.offsets

        for k in range(n - 1, -1, -1):
            flip, phase, idle = self.ops[k]
            m_out, z_out = self.outputs[k]
            adj_out[k] = (gm, gz)
            g_gate[k] = np.sum((np.conj(gm) * m_out).real) + np.sum(gz * z_out)

            # evolve
            g_idle[k] = (np.sum((np.conj(gm) * m_out * (-inv_t2 + 1j * psi_dot)).real)
                         - np.sum(gz * (z_out - m0) * inv_t1))
            w, e1 = _precession(batch, idle)
            gm = np.conj(w) * gm
            gz = e1 * gz
            if flip is None:
                continue

            # rf
            m_in, z_in = self.inputs[k]
            m_mid, _ = self._mid[k]
            ca, sa = _rf_angles(flip, batch.b1)
            e = np.exp(-1j * phase)
            y1 = (e * m_in).imag
            y2 = ca * y1 - sa * z_in
            z2 = sa * y1 + ca * z_in
            g2 = e * gm
            gx1, gy2, gz2 = g2.real, g2.imag, gz
            g_alpha = np.sum(gz2 * y2 - gy2 * z2, axis=1)
            g_flip[k] = np.sum(batch.b1 * g_alpha)
            gy1 = ca * gy2 + sa * gz2
            gz_new = -sa * gy2 + ca * gz2
            gm_new = np.conj(e) * (gx1 + 1j * gy1)
            # d/dphase of Rz(p) R Rz(-p): generator i*m on both sides
            g_phase[k] = (np.sum((np.conj(gm) * 1j * m_mid).real)
                          - np.sum((np.conj(gm_new) * 1j * m_in).real))
            gm, gz = gm_new, gz_new

        idles = np.array([op[2] for op in self.ops], dtype=float)
        return Grads(g_flip, g_phase, g_idle, g_idle * (idles + LOG_EPS), g_gate, adj_out)


def pairing_moments(gm, gz, m_in, z_in, batch: VoxelBatch, dt: float):
    """Per-voxel sums for pairing an output adjoint with RF-then-evolve outputs.

    ``(gm, gz)`` is the adjoint after an op of idle ``dt`` and ``(m_in,
    z_in)`` the state before it.  See :func:`rf_pairing`.
    """
    w, e1 = _precession(batch, dt)
    mu = np.conj(np.conj(w) * gm)
    nu = e1 * gz
    m0 = batch.m0[:, None]
    return {
        "A": np.sum(mu * m_in, axis=1), "B": np.sum(mu * np.conj(m_in), axis=1),
        "C": np.sum(mu * z_in, axis=1), "D": np.sum(nu * z_in, axis=1),
        "E": np.sum(nu * m_in, axis=1), "const": float(np.sum(gz * m0 * (1.0 - e1))),
    }


def rf_pairing(mom: dict, flip: float, phase: float, b1) -> float:
    """<adjoint, evolve(apply_rf(state))> from :func:`pairing_moments`.

    Uses m' = cos^2(a/2) m + sin^2(a/2) e^{2i phase} conj(m) - i sin(a) e^{i phase} z
    and z' = cos(a) z + sin(a) Im(e^{-i phase} m) with a = b1 * flip.
    """
    a = np.asarray(b1, dtype=float) * flip
    e = np.exp(1j * phase)
    trans = (np.cos(a / 2) ** 2 * mom["A"] + np.sin(a / 2) ** 2 * e * e * mom["B"]
             - 1j * np.sin(a) * e * mom["C"]).real
    lon = np.cos(a) * mom["D"] + np.sin(a) * (np.conj(e) * mom["E"]).imag
    return float(np.sum(trans + lon)) + mom["const"]


def simulate_with_grads(seq: Sequence, batch: VoxelBatch, dl_dmag):
    """Forward + backward.  ``dl_dmag`` is an array or a callable of |s|."""
    tape = Tape.from_sequence(seq, batch)
    adj = dl_dmag(tape.magnitude) if callable(dl_dmag) else dl_dmag
    return tape.magnitude, tape.backward(adj)


def robustness_map(seq: Sequence, voxel: VoxelBatch, db0=None, b1=None):
    """Signal magnitude of one voxel over a (B1+, dB0) grid.

    Returns ``(b1_values, db0_values, magnitude[b1, db0])``.
    """
    db0 = np.linspace(-50.0, 50.0, 11) if db0 is None else np.asarray(db0, float)
    b1 = np.linspace(0.8, 1.2, 11) if b1 is None else np.asarray(b1, float)
    if len(voxel) != 1:
        raise ValueError("robustness map needs exactly one voxel")
    B, D = np.meshgrid(b1, db0, indexing="ij")
    idx = np.zeros(B.size, dtype=int)
    grid = voxel.subset(idx).with_field(b1=B.ravel(), db0=D.ravel())
    mag = simulate(seq, grid).magnitude.reshape(B.shape)
    return b1, db0, mag
