"""Dense 4-D tensors with taped reverse-mode gradients.

Every value in the system is a (batch, channel, height, width) array,
float32 by default with an opt-in float64 mode used for gradient checks.
Forward operators record their backward rule on the active Tape; replaying
the tape in reverse accumulates gradients into every tensor that asked for
them.
"""

from __future__ import annotations

import struct

import numpy as np

DEFAULT_DTYPE = np.float32

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.float32, 1: np.float64}


class ShapeError(ValueError):
    """A tensor operation received incompatible shapes."""


class TapeError(RuntimeError):
    """Invalid use of a gradient tape (e.g. backward on a consumed tape)."""


class Tensor:
    """Dense (N, C, H, W) value, optionally accumulating a gradient.

    ``grad`` exists iff ``requires_grad`` and always matches ``data`` in
    shape and dtype.  ``frozen`` marks parameters the optimizer must skip.
    """

    __slots__ = ("data", "requires_grad", "grad", "frozen")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (N,C,H,W), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.frozen = False

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def freeze(self):
        """Exclude this parameter from gradients and optimizer updates."""
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @staticmethod
    def scalar(value, dtype=None, requires_grad: bool = False) -> "Tensor":
        arr = np.full((1, 1, 1, 1), value, dtype=dtype or DEFAULT_DTYPE)
        return Tensor(arr, requires_grad=requires_grad)

    @staticmethod
    def zeros(shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward().

    A tape belongs to one training thread.  Once consumed (or cleared) its
    saved intermediates are freed and a second backward raises TapeError.
    """

    def __init__(self):
        self._records = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, backward_fn):
        self._records.append(backward_fn)

    def clear(self):
        """Free all saved intermediates and mark the tape consumed."""
        self._records.clear()
        self.consumed = True

    def __len__(self) -> int:
        return len(self._records)


def backward(loss: Tensor, tape: Tape):
    """Reverse-accumulate gradients of a scalar ``loss`` through ``tape``.

    Gradients of all tensors reachable from the loss are summed over every
    path; recorded-but-unreachable tensors keep their zero gradient.  The
    tape is consumed afterwards.
    """
    if tape.consumed:
        raise TapeError("tape already consumed; record a fresh forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad[...] = 1.0
    for fn in reversed(tape._records):
        fn()
    tape.clear()


class Rng:
    """Deterministic pseudo-random stream (Philox 4x64 counter-based).

    The generator state is integer-defined, so identical seeds produce
    identical streams on every platform.  ``child(k)`` derives independent
    named substreams, also a pure function of (seed, path).
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = tuple(int(p) for p in _path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def child(self, k: int) -> "Rng":
        return Rng(self.seed, self._path + (int(k),))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"


def truncated_normal_init(shape, stddev: float, rng: Rng, dtype=None,
                          requires_grad: bool = False) -> Tensor:
    """Samples N(0, stddev^2) with rejection outside +/- 2*stddev."""
    if stddev <= 0:
        raise ValueError(f"truncated_normal_init: stddev must be positive, got {stddev}")
    n = int(np.prod(shape))
    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        draw = rng.gen.standard_normal(n - filled) * stddev
        keep = draw[np.abs(draw) <= 2.0 * stddev]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    arr = out.reshape(shape).astype(dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# PDT1 tensor file format: magic "PDT1", u32 LE rank (= 4), four u32 extents,
# u8 dtype tag (0 = f32, 1 = f64), then raw little-endian scalars row-major.

PDT1_MAGIC = b"PDT1"


def write_tensor(f, arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    if arr.ndim != 4:
        raise ShapeError(f"PDT1 stores 4-D tensors, got shape {arr.shape}")
    if arr.dtype not in _DTYPE_TAGS:
        raise ValueError(f"PDT1 stores f32/f64, got {arr.dtype}")
    f.write(PDT1_MAGIC)
    f.write(struct.pack("<I", 4))
    f.write(struct.pack("<4I", *arr.shape))
    f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
    le = arr.dtype.newbyteorder("<")
    f.write(arr.astype(le, copy=False).tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(f) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != PDT1_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {PDT1_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    if rank != 4:
        raise ValueError(f"unsupported tensor rank {rank}")
    shape = struct.unpack("<4I", _read_exact(f, 16))
    (tag,) = struct.unpack("<B", _read_exact(f, 1))
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = np.dtype(_TAG_DTYPES[tag])
    n = int(np.prod(shape))
    raw = _read_exact(f, n * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(shape)


def save_tensor(path, arr: np.ndarray):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
