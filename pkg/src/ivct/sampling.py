"""Incomplete-view protocols: sampling vectors, sinogram reduction and masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .physics import Sinogram

SVCT, LACT, HYBRID = 1, 2, 3
_TAGS = {SVCT: "svct", LACT: "lact", HYBRID: "hybrid"}


class SamplingError(ValueError):
    """Invalid sampling parameters or an empty protocol."""


def _param_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass
class SamplingVector:
    bits: np.ndarray
    scenario_tag: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if not self.bits.any():
            raise SamplingError("sampling vector selects no views")
        if np.any(self.bits > 1):
            raise SamplingError("sampling vector must be binary")

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other) -> bool:
        return isinstance(other, SamplingVector) and np.array_equal(self.bits, other.bits)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.bits.astype(dtype)

    def to_text(self) -> str:
        """Run-length text form, e.g. ``v1;len=720;runs=1x180,0x540;tag=lact``."""
        change = np.flatnonzero(np.diff(self.bits)) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [self.bits.size]])
        runs = ",".join(f"{self.bits[s]}x{e - s}" for s, e in zip(starts, ends))
        text = f"v1;len={self.bits.size};runs={runs};tag={self.scenario_tag}"
        if self.params:
            text += ";params=" + ",".join(f"{k}:{v}" for k, v in self.params.items())
        return text

    @classmethod
    def from_text(cls, text: str) -> "SamplingVector":
        fields = dict(part.split("=", 1) for part in text.strip().split(";")[1:] if "=" in part)
        if not text.startswith("v1;") or "len" not in fields or "runs" not in fields:
            raise SamplingError(f"not a v1 sampling vector: {text[:40]!r}")
        bits = []
        for run in fields["runs"].split(","):
            value, count = run.split("x")
            bits.append(np.full(int(count), int(value), dtype=np.uint8))
        bits = np.concatenate(bits)
        if bits.size != int(fields["len"]):
            raise SamplingError(f"runs cover {bits.size} views but len={fields['len']}")
        params = {}
        if fields.get("params"):
            for item in fields["params"].split(","):
                key, value = item.split(":", 1)
                params[key] = _param_value(value)
        return cls(bits, fields.get("tag", "custom"), params)


def svct_vector(n_view: int, n_full: int = 720) -> SamplingVector:
    """``n_view`` equidistant views at ``floor(i * n_full / n_view)``."""
    if not 1 <= n_view <= n_full:
        raise SamplingError(f"n_view must be in [1, {n_full}], got {n_view}")
    bits = np.zeros(n_full, dtype=np.uint8)
    bits[(np.arange(n_view) * n_full) // n_view] = 1
    return SamplingVector(bits, "svct", {"n_view": int(n_view)})


def _angle_index(angle: float, n_full: int, span: float) -> int:
    return int(math.ceil(angle / span * n_full - 1e-9))


def lact_vector(start_deg: float, end_deg: float, n_full: int = 720, span_deg: float = 360.0) -> SamplingVector:
    """Contiguous views whose angles fall in ``[start_deg, end_deg)``."""
    if not 0 <= start_deg < end_deg <= span_deg:
        raise SamplingError(f"angular range [{start_deg}, {end_deg}] must satisfy 0 <= start < end <= {span_deg}")
    lo, hi = _angle_index(start_deg, n_full, span_deg), _angle_index(end_deg, n_full, span_deg)
    if hi <= lo:
        raise SamplingError("angular range contains no views")
    bits = np.zeros(n_full, dtype=np.uint8)
    bits[lo:hi] = 1
    return SamplingVector(bits, "lact", {"start": float(start_deg), "end": float(end_deg)})


def contiguous_range(v: SamplingVector) -> tuple[int, int]:
    idx = v.indices
    if idx[-1] - idx[0] + 1 != idx.size:
        raise SamplingError("sampling vector is not a single contiguous run")
    return int(idx[0]), int(idx[-1]) + 1


def hybrid_vector(a: SamplingVector, b: SamplingVector, mode: str, n_view: int | None = None) -> SamplingVector:
    """Combine two protocols.

    ``union`` / ``intersect`` are bitwise OR / AND. ``svct_within_lact`` places
    ``n_view`` (default: popcount of ``a``) equidistant views inside ``b``'s
    contiguous range.
    """
    if len(a) != len(b):
        raise SamplingError(f"length mismatch {len(a)} vs {len(b)}")
    if mode == "union":
        bits = a.bits | b.bits
    elif mode == "intersect":
        bits = a.bits & b.bits
    elif mode == "svct_within_lact":
        lo, hi = contiguous_range(b)
        n_view = a.popcount if n_view is None else int(n_view)
        if not 1 <= n_view <= hi - lo:
            raise SamplingError(f"cannot place {n_view} views in a range of {hi - lo}")
        bits = np.zeros(len(b), dtype=np.uint8)
        bits[lo + (np.arange(n_view) * (hi - lo)) // n_view] = 1
    else:
        raise SamplingError(f"unknown hybrid mode {mode!r}")
    if not bits.any():
        raise SamplingError(f"{mode} of the two protocols is empty")
    return SamplingVector(bits, "hybrid", {"mode": mode})


def reduce_sinogram(sino: Sinogram, v: SamplingVector) -> Sinogram:
    """Keep the rows selected by ``v`` (zero rows removed), in original order."""
    if sino.data.shape[0] != len(v) or sino.view_indices.size != len(v):
        raise SamplingError(f"sinogram has {sino.data.shape[0]} rows, sampling vector {len(v)}")
    keep = v.indices
    return Sinogram(sino.data[keep].copy(), sino.geometry, sino.view_indices[keep])


def zero_fill(sino: Sinogram, n_full: int | None = None) -> np.ndarray:
    """Scatter measured rows back into a full-size array of zeros."""
    n_full = n_full or sino.geometry.n_full_views
    out = np.zeros((n_full, sino.data.shape[1]), dtype=sino.data.dtype)
    out[sino.view_indices] = sino.data
    return out


def mask_matrix(v: SamplingVector, n_detectors: int) -> np.ndarray:
    """``diag(v) @ ones(n_full, n_detectors)``."""
    return np.repeat(v.bits.astype(np.float32)[:, None], n_detectors, axis=1)


@dataclass(frozen=True)
class SettingSpec:
    """A scenario and its setting: ``value`` is N_view (SVCT) or the end angle (LACT)."""

    scenario: int
    value: float
    start: float = 0.0

    @property
    def tag(self) -> str:
        return _TAGS.get(self.scenario, "custom")

    @property
    def label(self) -> str:
        if self.scenario == SVCT:
            return f"svct-{int(self.value)}"
        if self.scenario == LACT:
            return f"lact-{self.start:g}-{self.value:g}"
        return f"{self.tag}-{self.value:g}"

    def vector(self, n_full: int = 720, span_deg: float = 360.0) -> SamplingVector:
        if self.scenario == SVCT:
            return svct_vector(int(self.value), n_full)
        if self.scenario == LACT:
            return lact_vector(self.start, self.value, n_full, span_deg)
        raise SamplingError(f"scenario {self.scenario} has no direct vector; build hybrids with hybrid_vector")

    @property
    def difficulty(self) -> float:
        """Fraction of the training range still missing (0 = easiest, 1 = hardest)."""
        from .training import loss_scale

        return 2.0 * (1.0 - loss_scale(self))

    @classmethod
    def parse(cls, text: str) -> "SettingSpec":
        """Parse ``svct:72``, ``lact:90`` or ``lact:30-120``."""
        kind, _, value = text.strip().partition(":")
        kind = kind.lower()
        if kind == "svct":
            return cls(SVCT, int(value))
        if kind == "lact":
            if "-" in value:
                lo, hi = value.split("-")
                return cls(LACT, float(hi), float(lo))
            return cls(LACT, float(value))
        raise SamplingError(f"cannot parse setting {text!r}")

    def to_text(self) -> str:
        if self.scenario == SVCT:
            return f"svct:{int(self.value)}"
        if self.start:
            return f"lact:{self.start:g}-{self.value:g}"
        return f"lact:{self.value:g}"
