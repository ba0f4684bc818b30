"""Synthetic voxel populations and the intra-voxel spin grid.

Each voxel is simulated with 256 spins.  Their static frequency offsets
combine a Lorentzian distribution (reversible T2' dephasing, HWHM
1/(2 pi T2')) and a flat intra-voxel spread in [-spread, spread] Hz.  Both
components are realized deterministically by midpoint quantiles; the two
256-point marginals are paired through a symmetric rank-1 lattice so the
joint sample fills the product distribution evenly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

N_SPINS = 256
# odd generator close to N/golden ratio; see spin_grid
_LATTICE_GEN = 157

TISSUES = ("GM", "WM", "CSF")
GM, WM, CSF = 0, 1, 2


@dataclass(frozen=True)
class TissueParams:
    """Mean and standard deviation of each tissue property (times in ms)."""

    m0: tuple[float, float]
    t1: tuple[float, float]
    t2: tuple[float, float]
    t2prime: tuple[float, float]


@dataclass(frozen=True)
class TissueTable:
    tissues: dict = field(default_factory=dict)
    b1_range: tuple[float, float] = (0.8, 1.2)
    db0_range: tuple[float, float] = (-50.0, 50.0)
    spread: float = 30.0

    def with_t1(self, tissue: str, mean: float, std: float) -> "TissueTable":
        tissues = dict(self.tissues)
        tissues[tissue] = replace(tissues[tissue], t1=(mean, std))
        return replace(self, tissues=tissues)

    def to_dict(self) -> dict:
        return {
            "tissues": {k: asdict(v) for k, v in self.tissues.items()},
            "b1_range": list(self.b1_range),
            "db0_range": list(self.db0_range),
            "spread": self.spread,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TissueTable":
        tissues = {}
        for name, p in d["tissues"].items():
            if name not in TISSUES:
                raise ValueError(f"unknown tissue {name!r}")
            tissues[name] = TissueParams(**{k: tuple(v) for k, v in p.items()})
        missing = set(TISSUES) - set(tissues)
        if missing:
            raise ValueError(f"tissue table lacks {sorted(missing)}")
        return cls(
            tissues=tissues,
            b1_range=tuple(d.get("b1_range", (0.8, 1.2))),
            db0_range=tuple(d.get("db0_range", (-50.0, 50.0))),
            spread=float(d.get("spread", 30.0)),
        )

    @classmethod
    def load(cls, path) -> "TissueTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


DEFAULT_TABLE = TissueTable(
    tissues={
        "GM": TissueParams(m0=(0.8, 0.02), t1=(1331.0, 57.0), t2=(110.0, 9.0), t2prime=(170.0, 27.0)),
        "WM": TissueParams(m0=(0.7, 0.02), t1=(832.0, 44.0), t2=(80.0, 3.0), t2prime=(161.0, 17.0)),
        "CSF": TissueParams(m0=(1.0, 0.0), t1=(4000.0, 200.0), t2=(2000.0, 100.0), t2prime=(6000.0, 300.0)),
    }
)

# identical GM/WM T1 for the T2-contrast variant of the contrast experiment
SAME_T1_TABLE = DEFAULT_TABLE.with_t1("GM", 1000.0, 50.0).with_t1("WM", 1000.0, 50.0)


def _midpoints(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def _lattice_perm(n: int = N_SPINS, gen: int = _LATTICE_GEN) -> np.ndarray:
    # k -> (gen*k + c) mod n, with c chosen so that k -> n-1-k maps onto
    # perm -> n-1-perm; keeps the offset set symmetric about zero.
    c = (gen - 1) // 2
    return (gen * np.arange(n) + c) % n


_UNIT_LORENTZ = np.tan(np.pi * (_midpoints(N_SPINS) - 0.5))[_lattice_perm()]
_UNIT_LINEAR = 2.0 * _midpoints(N_SPINS) - 1.0


def spin_grid(t2prime, spread: float) -> np.ndarray:
    """Static per-spin frequency offsets in Hz.

    ``t2prime`` may be a scalar or an array of voxels (ms; ``np.inf``
    disables the Lorentzian part).  Returns shape ``(..., 256)``.
    """
    t2p = np.asarray(t2prime, dtype=float)
    with np.errstate(divide="ignore"):
        hwhm = np.where(np.isinf(t2p), 0.0, 1e3 / (2 * np.pi * t2p))
    return hwhm[..., None] * _UNIT_LORENTZ + spread * _UNIT_LINEAR


@dataclass
class VoxelBatch:
    """Tissue and imaging properties for a set of voxels.

    Times in ms, dB0 in Hz, b1 a dimensionless flip-angle scale.
    """

    tissue: np.ndarray
    m0: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    t2prime: np.ndarray
    b1: np.ndarray
    db0: np.ndarray
    spread: float = 30.0
    seed: int | None = None
    _offsets: np.ndarray | None = field(default=None, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.tissue)

    @property
    def offsets(self) -> np.ndarray:
        """Total per-spin frequency (Hz), shape (V, 256): dB0 + intra-voxel offsets."""
        if self._offsets is None:
            self._offsets = self.db0[:, None] + spin_grid(self.t2prime, self.spread)
        return self._offsets

    @property
    def cache(self) -> dict:
        """Scratch space for derived per-batch arrays (reset on any copy)."""
        return self._cache

    def subset(self, idx) -> "VoxelBatch":
        idx = np.asarray(idx)
        return VoxelBatch(
            tissue=self.tissue[idx], m0=self.m0[idx], t1=self.t1[idx], t2=self.t2[idx],
            t2prime=self.t2prime[idx], b1=self.b1[idx], db0=self.db0[idx],
            spread=self.spread, seed=self.seed,
            _offsets=None if self._offsets is None else self._offsets[idx],
        )

    def tissue_mask(self, tissue: int | str) -> np.ndarray:
        if isinstance(tissue, str):
            tissue = TISSUES.index(tissue)
        return self.tissue == tissue

    def counts(self) -> dict:
        return {name: int(np.sum(self.tissue == i)) for i, name in enumerate(TISSUES)}

    def with_field(self, b1=None, db0=None) -> "VoxelBatch":
        b1 = self.b1 if b1 is None else np.broadcast_to(np.asarray(b1, float), self.b1.shape).copy()
        db0 = self.db0 if db0 is None else np.broadcast_to(np.asarray(db0, float), self.db0.shape).copy()
        return replace(self, b1=b1, db0=db0, _offsets=None, _cache={})


def nominal_voxels(tissues=TISSUES, table: TissueTable = DEFAULT_TABLE, b1=1.0, db0=0.0,
                   spread: float | None = None, t2prime: bool = True) -> VoxelBatch:
    """One voxel per requested tissue at the table means."""
    codes = np.array([TISSUES.index(t) for t in tissues])
    ps = [table.tissues[t] for t in tissues]
    n = len(ps)
    return VoxelBatch(
        tissue=codes,
        m0=np.array([p.m0[0] for p in ps]),
        t1=np.array([p.t1[0] for p in ps]),
        t2=np.array([p.t2[0] for p in ps]),
        t2prime=np.array([p.t2prime[0] if t2prime else np.inf for p in ps]),
        b1=np.full(n, float(b1)),
        db0=np.full(n, float(db0)),
        spread=table.spread if spread is None else spread,
    )


def _truncated_normal(rng, mean, std, n, nsig=4.0):
    z = np.clip(rng.standard_normal(n), -nsig, nsig)
    return mean + std * z


def sample_population(n: int, seed, table: TissueTable = DEFAULT_TABLE) -> VoxelBatch:
    """Draw ``n`` voxels with approximately equal tissue counts.

    Voxel i gets tissue ``i % 3``.  Gaussian tissue draws are clipped at
    +/-4 sigma; T2 is capped below T1.
    """
    if n < 3:
        raise ValueError("population needs at least 3 voxels to cover GM, WM and CSF")
    rng = np.random.default_rng(seed)
    tissue = np.arange(n) % 3
    m0 = np.empty(n)
    t1 = np.empty(n)
    t2 = np.empty(n)
    t2p = np.empty(n)
    for code, name in enumerate(TISSUES):
        p = table.tissues[name]
        idx = np.flatnonzero(tissue == code)
        k = len(idx)
        m0[idx] = _truncated_normal(rng, *p.m0, k)
        t1[idx] = _truncated_normal(rng, *p.t1, k)
        t2[idx] = _truncated_normal(rng, *p.t2, k)
        t2p[idx] = _truncated_normal(rng, *p.t2prime, k)
    t1 = np.maximum(t1, 1.0)
    t2 = np.clip(t2, 0.5, 0.99 * t1)
    t2p = np.maximum(t2p, 1.0)
    m0 = np.clip(m0, 1e-3, 1.05)
    b1 = rng.uniform(*table.b1_range, n)
    db0 = rng.uniform(*table.db0_range, n)
    return VoxelBatch(tissue, m0, t1, t2, t2p, b1, db0, spread=table.spread,
                      seed=seed if isinstance(seed, int) else None)


def stratified_indices(tissue: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Batch indices drawn with replacement, equal share per tissue.

    GM and WM get the same count so contrast terms can pair them by index.
    """
    k = (size + 1) // 3
    per = [k, k, size - 2 * k]
    out = []
    for code, k in enumerate(per):
        pool = np.flatnonzero(tissue == code)
        if len(pool) == 0:
            raise ValueError(f"population has no {TISSUES[code]} voxels")
        out.append(pool[rng.integers(0, len(pool), k)])
    return np.concatenate(out)
