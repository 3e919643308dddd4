"""Recording and replaying velocity evaluations.

A trace is an ordered list of (step, branch, t, velocity) records.  The
on-disk format is a little-endian binary stream: the magic ``VTRC``, a
u16 version, then one record after another.  Velocities are stored as
32-bit floats, which is also the precision recorded in memory, so a
recorded run and its replay produce bit-identical arithmetic.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .grid import Grid

__all__ = [
    "TraceRecord",
    "VelocityTrace",
    "latent_digest",
    "quantize_f32",
    "TRACE_MAGIC",
    "TRACE_VERSION",
]

TRACE_MAGIC = b"VTRC"
TRACE_VERSION = 1

_BRANCHES = ("src", "tar")
_HEADER = struct.Struct("<4sH")
_RECORD_FIXED = struct.Struct("<IBdIII")


def quantize_f32(g: Grid) -> Grid:
    """Round a grid to 32-bit float precision (stored back as float64)."""
    return Grid(g.data.astype(np.float32).astype(np.float64))


def latent_digest(g: Grid) -> str:
    """Hex digest identifying a latent, taken over its f32 byte image."""
    payload = np.ascontiguousarray(g.data.astype("<f4")).tobytes()
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True, eq=False)
class TraceRecord:
    """One recorded velocity evaluation.

    ``latent_hash`` identifies the query latent when the recorder saw it;
    it is kept in memory only and is not part of the file format, so
    traces read back from disk carry ``None`` here.
    """

    step: int
    branch: str
    t: float
    velocity: Grid
    latent_hash: str | None = None

    def __post_init__(self):
        if self.branch not in _BRANCHES:
            raise InvalidArgumentError(f"branch must be one of {_BRANCHES}, got {self.branch!r}")
        if self.step < 0:
            raise InvalidArgumentError(f"step must be non-negative, got {self.step}")
        if not (0.0 <= self.t <= 1.0):
            raise InvalidArgumentError(f"record time must lie in [0, 1], got {self.t}")


@dataclass(eq=False)
class VelocityTrace:
    """Ordered collection of trace records with binary (de)serialization."""

    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def write(self, path) -> None:
        """Write the trace in the binary VTRC format."""
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(TRACE_MAGIC, TRACE_VERSION))
            for rec in self.records:
                c, h, w = rec.velocity.shape
                branch_code = _BRANCHES.index(rec.branch)
                fh.write(_RECORD_FIXED.pack(rec.step, branch_code, rec.t, c, h, w))
                fh.write(np.ascontiguousarray(rec.velocity.data.astype("<f4")).tobytes())

    @classmethod
    def read(cls, path) -> "VelocityTrace":
        """Parse a binary VTRC file."""
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < _HEADER.size:
            raise ParseError(f"{path}: truncated trace header", offset=len(blob))
        magic, version = _HEADER.unpack_from(blob, 0)
        if magic != TRACE_MAGIC:
            raise ParseError(f"{path}: bad trace magic {magic!r}", offset=0)
        if version != TRACE_VERSION:
            raise ParseError(f"{path}: unsupported trace version {version}", offset=4)
        pos = _HEADER.size
        records: list[TraceRecord] = []
        while pos < len(blob):
            if pos + _RECORD_FIXED.size > len(blob):
                raise ParseError(f"{path}: truncated record header", offset=pos)
            step, branch_code, t, c, h, w = _RECORD_FIXED.unpack_from(blob, pos)
            pos += _RECORD_FIXED.size
            if branch_code >= len(_BRANCHES):
                raise ParseError(f"{path}: unknown branch code {branch_code}", offset=pos - _RECORD_FIXED.size + 4)
            count = c * h * w
            if count < 1:
                raise ParseError(f"{path}: empty record payload shape", offset=pos - 12)
            nbytes = 4 * count
            if pos + nbytes > len(blob):
                raise ParseError(f"{path}: truncated record payload", offset=pos)
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float64)
            pos += nbytes
            records.append(
                TraceRecord(
                    step=step,
                    branch=_BRANCHES[branch_code],
                    t=t,
                    velocity=Grid(data.reshape(c, h, w)),
                )
            )
        return cls(records=records)
