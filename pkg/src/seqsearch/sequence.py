"""Pulse sequence representation, validation and the text file format.

A sequence is an ordered list of instantaneous RF pulses and wait periods.
Each op carries the idle time that follows it; the readout happens at the
end of the last op's idle period.  Angles are radians internally and
degrees in files and reports; times are milliseconds throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

RF_IDLE_MIN = 6.2  # ms
MAX_RF = 5
_IDLE_TOL = 1e-9

FORMAT_HEADER = "# seqsearch sequence v1"


def wrap_phase(phi: float) -> float:
    """Map an angle in radians onto (-pi, pi]."""
    w = math.remainder(phi, 2 * math.pi)
    if w <= -math.pi:
        w += 2 * math.pi
    return w


def wrap_deg(phi_deg):
    """Map degrees onto (-180, 180]; works elementwise on arrays."""
    w = np.mod(np.asarray(phi_deg, dtype=float) + 180.0, 360.0) - 180.0
    w = np.where(w <= -180.0, w + 360.0, w)
    return w if w.ndim else float(w)


@dataclass(frozen=True)
class RfOp:
    flip: float
    phase: float = 0.0
    idle: float = RF_IDLE_MIN

    def __post_init__(self):
        object.__setattr__(self, "flip", float(self.flip))
        object.__setattr__(self, "phase", wrap_phase(float(self.phase)))
        object.__setattr__(self, "idle", float(self.idle))

    @classmethod
    def deg(cls, flip_deg: float, phase_deg: float = 0.0, idle: float = RF_IDLE_MIN) -> "RfOp":
        return cls(math.radians(flip_deg), math.radians(phase_deg), idle)

    @property
    def flip_deg(self) -> float:
        return math.degrees(self.flip)

    @property
    def phase_deg(self) -> float:
        return math.degrees(self.phase)


@dataclass(frozen=True)
class WaitOp:
    idle: float

    def __post_init__(self):
        object.__setattr__(self, "idle", float(self.idle))


Op = Union[RfOp, WaitOp]


@dataclass(frozen=True)
class Sequence:
    """Immutable op list.

    ``pre_delay`` is dead time before the first RF pulse.  It only arises
    when pruning removes the leading pulse; the magnetization is at
    equilibrium then, so the delay does not affect the signal, but it keeps
    the total duration intact.
    """

    ops: tuple = ()
    pre_delay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "pre_delay", float(self.pre_delay))

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    @property
    def rf_ops(self) -> list[RfOp]:
        return [op for op in self.ops if isinstance(op, RfOp)]

    @property
    def n_rf(self) -> int:
        return len(self.rf_ops)

    @property
    def duration(self) -> float:
        return self.pre_delay + sum(op.idle for op in self.ops)

    @property
    def time_to_readout(self) -> float:
        """Time from the first RF pulse to the readout (ms)."""
        return sum(op.idle for op in self.ops)

    def rf_times(self) -> list[float]:
        """Application time of each RF pulse, measured from the first one."""
        t, out = 0.0, []
        for op in self.ops:
            if isinstance(op, RfOp):
                out.append(t)
            t += op.idle
        return out

    def flips_deg(self) -> list[float]:
        return [op.flip_deg for op in self.rf_ops]

    def phases_deg(self) -> list[float]:
        return [op.phase_deg for op in self.rf_ops]


def hahn_echo(flip1=90.0, flip2=180.0, phase2=180.0, idle1=RF_IDLE_MIN, idle2=RF_IDLE_MIN) -> Sequence:
    return Sequence((RfOp.deg(flip1, 0.0, idle1), RfOp.deg(flip2, phase2, idle2)))


def inversion_recovery(ti: float, flip1=180.0, flip2=90.0, phase2=0.0, idle2=RF_IDLE_MIN) -> Sequence:
    return Sequence((RfOp.deg(flip1, 0.0, ti), RfOp.deg(flip2, phase2, idle2)))


def validate(seq: Sequence) -> list[str]:
    """Return every invariant violation; an empty list means the sequence is valid."""
    errors = []
    if not seq.ops:
        return ["empty sequence"]
    if not isinstance(seq.ops[0], RfOp):
        errors.append("first op must be RF")
    if seq.n_rf > MAX_RF:
        errors.append(f"too many RF pulses ({seq.n_rf} > {MAX_RF})")
    if seq.pre_delay < 0:
        errors.append("pre_delay < 0")
    for i, op in enumerate(seq.ops):
        if isinstance(op, RfOp):
            if not op.flip >= 0:
                errors.append(f"op {i}: flip angle < 0")
            if not op.idle >= RF_IDLE_MIN - _IDLE_TOL:
                errors.append(f"op {i}: idle_after < {RF_IDLE_MIN} ms")
        elif isinstance(op, WaitOp):
            if not op.idle > 0:
                errors.append(f"op {i}: wait idle must be > 0")
        else:
            errors.append(f"op {i}: unknown op type {type(op).__name__}")
    return errors


class InvalidSequence(ValueError):
    pass


def check(seq: Sequence) -> Sequence:
    errors = validate(seq)
    if errors:
        raise InvalidSequence("; ".join(errors))
    return seq


def prune_small_flips(seq: Sequence, threshold: float = math.radians(3.0)) -> Sequence:
    """Drop RF pulses with flip below ``threshold`` (radians).

    The idle time of a dropped pulse is merged into the preceding op.  A
    dropped leading pulse (and any waits before the next surviving pulse)
    becomes ``pre_delay``, so the total duration is preserved exactly.
    """
    kept: list[Op] = []
    lead = seq.pre_delay
    for op in seq.ops:
        if isinstance(op, RfOp) and op.flip >= threshold:
            kept.append(op)
            continue
        if isinstance(op, WaitOp) and kept:
            kept.append(op)
            continue
        # pruned RF, or a wait before any surviving RF
        if not kept:
            lead += op.idle
        elif isinstance(op, RfOp):
            prev = kept[-1]
            if isinstance(prev, RfOp):
                kept[-1] = RfOp(prev.flip, prev.phase, prev.idle + op.idle)
            else:
                kept[-1] = WaitOp(prev.idle + op.idle)
    if not any(isinstance(op, RfOp) for op in kept):
        raise InvalidSequence("empty sequence: pruning removed every RF pulse")
    return Sequence(tuple(kept), pre_delay=lead)


# ---------------------------------------------------------------------------
# text format


class SequenceParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None, field: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field '{field}'")
        super().__init__(f"{', '.join(loc)}: {msg}" if loc else msg)
        self.line = line
        self.field = field


def _fmt(x: float) -> str:
    return repr(float(x))


def _deg_str(rad: float) -> str:
    """Degree string that converts back to exactly ``rad`` when such a double exists.

    Otherwise the nearest one is used (off by one ulp in radians).
    """
    d = math.degrees(rad)
    if math.radians(float(repr(d))) == rad:
        return repr(d)
    lo = hi = d
    for _ in range(64):
        lo = np.nextafter(lo, -np.inf)
        hi = np.nextafter(hi, np.inf)
        for cand in (float(lo), float(hi)):
            if math.radians(cand) == rad:
                return repr(cand)
    return repr(d)


def serialize(seq: Sequence) -> str:
    lines = [FORMAT_HEADER, f"pre_delay_ms = {_fmt(seq.pre_delay)}", ""]
    for op in seq.ops:
        lines.append("[op]")
        if isinstance(op, RfOp):
            lines.append("kind = rf")
            lines.append(f"flip_deg = {_deg_str(op.flip)}")
            lines.append(f"phase_deg = {_deg_str(op.phase)}")
        else:
            lines.append("kind = wait")
        lines.append(f"idle_ms = {_fmt(op.idle)}")
        lines.append("")
    return "\n".join(lines)


_RF_FIELDS = {"kind", "flip_deg", "phase_deg", "idle_ms"}
_WAIT_FIELDS = {"kind", "idle_ms"}


def _build_op(entry: dict, start_line: int) -> Op:
    kind = entry.get("kind")
    if kind is None:
        raise SequenceParseError("missing kind", start_line, "kind")
    kind_val, kind_line = kind
    fields = _RF_FIELDS if kind_val == "rf" else _WAIT_FIELDS if kind_val == "wait" else None
    if fields is None:
        raise SequenceParseError(f"unknown op kind '{kind_val}'", kind_line, "kind")
    for key, (_, ln) in entry.items():
        if key not in fields:
            raise SequenceParseError(f"unexpected field for {kind_val} op", ln, key)
    values = {}
    for key in fields - {"kind"}:
        if key not in entry:
            raise SequenceParseError("missing field", start_line, key)
        raw, ln = entry[key]
        try:
            values[key] = float(raw)
        except ValueError:
            raise SequenceParseError(f"not a number: {raw!r}", ln, key) from None
        if not math.isfinite(values[key]):
            raise SequenceParseError(f"non-finite value {raw!r}", ln, key)
    if kind_val == "rf":
        return RfOp(math.radians(values["flip_deg"]), math.radians(values["phase_deg"]), values["idle_ms"])
    return WaitOp(values["idle_ms"])


def deserialize(text: str) -> Sequence:
    pre_delay = 0.0
    entries: list[tuple[int, dict]] = []
    current: dict | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[op]":
            current = {}
            entries.append((lineno, current))
            continue
        if line.startswith("["):
            raise SequenceParseError(f"unknown section {line}", lineno)
        if "=" not in line:
            raise SequenceParseError("expected 'key = value'", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if current is None:
            if key != "pre_delay_ms":
                raise SequenceParseError("unknown header key", lineno, key)
            try:
                pre_delay = float(val)
            except ValueError:
                raise SequenceParseError(f"not a number: {val!r}", lineno, key) from None
            continue
        if key in current:
            raise SequenceParseError("duplicate field", lineno, key)
        current[key] = (val, lineno)
    return Sequence(tuple(_build_op(e, ln) for ln, e in entries), pre_delay=pre_delay)


def save(seq: Sequence, path) -> None:
    Path(path).write_text(serialize(seq))


def load(path) -> Sequence:
    return deserialize(Path(path).read_text())


def describe(seq: Sequence) -> str:
    parts = []
    for op in seq.ops:
        if isinstance(op, RfOp):
            parts.append(f"RF {op.flip_deg:.1f}deg/{op.phase_deg:.1f}deg [{op.idle:.2f} ms]")
        else:
            parts.append(f"wait [{op.idle:.2f} ms]")
    return " -> ".join(parts)
