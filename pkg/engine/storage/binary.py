"""
Binary codecs for weights (LQFW), problems (LQFP) and K-FAC factors (LQFK).

Every file starts with a four-byte magic and a u32 format version. Integers
and float64 arrays are little-endian; arrays are written row-major.

LQFW layout:
    "LQFW" u32 version, u64 D, D x f64,
    u32 count, per record: u32 layer-id, u64 offset, u32 rank, rank x u64 dims
"""

import logging
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError, StorageError
from ..kfac import KfacState, KroneckerFactor, ScalarGroup
from ..network import LayoutRecord, NetworkSpec, ParamVector
from ..quadratic import LinearizedProblem

logger = logging.getLogger(__name__)

VERSION = 1
WEIGHTS_MAGIC = b"LQFW"
PROBLEM_MAGIC = b"LQFP"
KFAC_MAGIC = b"LQFK"


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, fmt: str, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def array(self, values):
        self.parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())

    def int_array(self, values):
        self.parts.append(np.ascontiguousarray(values, dtype="<i8").tobytes())

    def text(self, value: str):
        raw = value.encode("utf-8")
        self.pack("I", len(raw))
        self.parts.append(raw)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    """Cursor over a byte string; every short read becomes a StorageError."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise StorageError(self.path, f"file is truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def array(self, count: int, shape=None) -> np.ndarray:
        values = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return values.reshape(shape) if shape is not None else values

    def int_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<i8").astype(np.int64)

    def text(self) -> str:
        size = self.unpack("I")
        return self.take(size).decode("utf-8")

    def header(self, magic: bytes):
        found = self.take(4)
        if found != magic:
            raise StorageError(self.path, f"bad magic {found!r}, expected {magic!r}")
        version = self.unpack("I")
        if version != VERSION:
            raise StorageError(self.path, f"unsupported format version {version}")

    def finish(self):
        if self.pos != len(self.data):
            raise StorageError(self.path, f"{len(self.data) - self.pos} trailing bytes")


def _write(path, payload: bytes) -> Path:
    path = Path(path)
    try:
        path.write_bytes(payload)
    except OSError as e:
        raise StorageError(path, f"cannot write: {e}")
    logger.debug(f"Wrote {len(payload)} bytes to {path}")
    return path


def _read(path) -> _Reader:
    path = Path(path)
    try:
        return _Reader(path.read_bytes(), path)
    except OSError as e:
        raise StorageError(path, f"cannot read: {e}")


def _checked(reader: _Reader, build):
    """Run a constructor and report its contract failures as a malformed file."""
    try:
        return build()
    except ContractError as e:
        raise StorageError(reader.path, f"malformed contents: {e}")


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def save_params(params: ParamVector, path) -> Path:
    """Write a ParamVector as an LQFW file."""
    out = _Writer()
    out.parts.append(WEIGHTS_MAGIC)
    out.pack("I", VERSION)
    out.pack("Q", params.size)
    out.array(params.values)
    out.pack("I", len(params.layout))
    for record in params.layout:
        out.pack("IQI", record.layer_id, record.offset, len(record.shape))
        out.pack(f"{len(record.shape)}Q", *record.shape)
    return _write(path, out.bytes())


def load_params(path) -> ParamVector:
    """Read an LQFW file."""
    reader = _read(path)
    reader.header(WEIGHTS_MAGIC)
    d = reader.unpack("Q")
    values = reader.array(d)
    layout = []
    for _ in range(reader.unpack("I")):
        layer_id, offset, rank = reader.unpack("IQI")
        dims = reader.unpack(f"{rank}Q") if rank else ()
        shape = tuple(dims) if isinstance(dims, tuple) else (dims,)
        layout.append(LayoutRecord(int(layer_id), int(offset), tuple(int(v) for v in shape)))
    reader.finish()
    return _checked(reader, lambda: ParamVector(values, tuple(layout)))


def save_spec(spec: NetworkSpec, path) -> Path:
    """Write a network spec as its JSON document."""
    path = Path(path)
    try:
        path.write_text(spec.to_document())
    except OSError as e:
        raise StorageError(path, f"cannot write: {e}")
    return path


def load_spec(path) -> NetworkSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise StorageError(path, f"cannot read: {e}")
    try:
        return NetworkSpec.from_document(text)
    except (ContractError, KeyError, TypeError, ValueError) as e:
        raise StorageError(path, f"malformed network document: {e}")


# ---------------------------------------------------------------------------
# Problems
# ---------------------------------------------------------------------------


def save_problem(problem: LinearizedProblem, path) -> Path:
    """
    Write a LinearizedProblem as an LQFP file.

    Layout: magic, version, u64 N, u32 C, u64 D, f64 lambda, f64 alpha,
    J (N*C x D), r (N*C), then u8 flag + f0 (N x C) and u8 flag + i64 labels.
    """
    out = _Writer()
    out.parts.append(PROBLEM_MAGIC)
    out.pack("I", VERSION)
    out.pack("QIQdd", problem.num_samples, problem.num_classes, problem.dim, problem.lam, problem.alpha)
    out.array(problem.J)
    out.array(problem.r)
    out.pack("B", problem.f0 is not None)
    if problem.f0 is not None:
        out.array(problem.f0)
    out.pack("B", problem.labels is not None)
    if problem.labels is not None:
        out.int_array(problem.labels)
    return _write(path, out.bytes())


def load_problem(path) -> LinearizedProblem:
    """Read an LQFP file."""
    reader = _read(path)
    reader.header(PROBLEM_MAGIC)
    n, c, d, lam, alpha = reader.unpack("QIQdd")
    J = reader.array(n * c * d, (n * c, d))
    r = reader.array(n * c)
    f0 = reader.array(n * c, (n, c)) if reader.unpack("B") else None
    labels = reader.int_array(n) if reader.unpack("B") else None
    reader.finish()
    return _checked(reader, lambda: LinearizedProblem(
        J=J, r=r, num_samples=n, num_classes=c, lam=lam, alpha=alpha, f0=f0, labels=labels,
    ))


# ---------------------------------------------------------------------------
# K-FAC factors
# ---------------------------------------------------------------------------


def save_kfac(state: KfacState, path) -> Path:
    """
    Write a frozen KfacState as an LQFK file.

    Layout: magic, version, u64 D, u64 samples, f64 damping, damping style
    (u32 length + utf-8), u32 factor count, per factor: u32 layer-id,
    u64 offset, u32 out, u32 in, A (in x in), G (out x out); u32 group count,
    per group: u32 layer-id, u64 offset, u64 size, f64 value.
    """
    if not state.frozen:
        raise ContractError("only an estimated K-FAC state can be saved")
    out = _Writer()
    out.parts.append(KFAC_MAGIC)
    out.pack("I", VERSION)
    out.pack("QQd", state.dim, state.num_samples, state.damping)
    out.text(state.damping_style)
    out.pack("I", len(state.factors))
    for factor in state.factors:
        out.pack("IQII", factor.layer_id, factor.offset, factor.shape[0], factor.shape[1])
        out.array(factor.A)
        out.array(factor.G)
    out.pack("I", len(state.groups))
    for group in state.groups:
        out.pack("IQQd", group.layer_id, group.offset, group.size, group.value)
    return _write(path, out.bytes())


def load_kfac(path) -> KfacState:
    """Read an LQFK file into a frozen KfacState."""
    reader = _read(path)
    reader.header(KFAC_MAGIC)
    dim, samples, damping = reader.unpack("QQd")
    style = reader.text()
    factors = []
    for _ in range(reader.unpack("I")):
        layer_id, offset, rows, cols = reader.unpack("IQII")
        A = reader.array(cols * cols, (cols, cols))
        G = reader.array(rows * rows, (rows, rows))
        factors.append((int(layer_id), int(offset), (int(rows), int(cols)), A, G))
    groups = []
    for _ in range(reader.unpack("I")):
        layer_id, offset, size, value = reader.unpack("IQQd")
        groups.append(ScalarGroup(int(layer_id), int(offset), int(size), float(value)))
    reader.finish()
    return _checked(reader, lambda: KfacState.from_factors(
        [KroneckerFactor(*entry) for entry in factors], groups, int(dim), int(samples),
        float(damping), style,
    ))
