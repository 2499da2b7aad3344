"""Dense float32 tensors and the primitives the rest of the engine builds on.

Tensors are plain ``numpy.ndarray`` objects in row-major NCHW layout. The
helpers here add the checks the engine relies on (shape validation, finite
values) and a small binary serialization format used by checkpoints::

    u32 rank | u32 dim * rank | f32 payload      (all little-endian)
"""

import io
import struct

import numpy as np

from .exceptions import NumericsError, ShapeError

DTYPE = np.float32

_U32 = struct.Struct("<I")


class Rng:
    """Seeded random stream backed by numpy's PCG64.

    PCG64 produces the same stream on every platform for a given seed, and its
    state is a plain dict, so it round-trips through JSON manifests.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self):
        return self._gen

    def normal(self, shape, mean=0.0, std=1.0):
        return self._gen.normal(mean, std, size=tuple(shape))

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=tuple(shape))

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def get_state(self):
        return self._gen.bit_generator.state

    def set_state(self, state):
        self._gen.bit_generator.state = state


def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"shape must be non-empty with all dims >= 1, got {shape}")
    return shape


def check_finite(x, what="tensor"):
    """Raise :class:`NumericsError` if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")
    return x


def zeros(shape, dtype=DTYPE):
    return np.zeros(_check_shape(shape), dtype=dtype)


def randn(shape, rng, mean=0.0, std=1.0, dtype=DTYPE):
    """I.i.d. normal samples drawn from ``rng`` (an :class:`Rng` or an int seed)."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    shape = _check_shape(shape)
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    return rng.normal(shape, mean, std).astype(dtype)


def _broadcastable(a_shape, b_shape):
    # b may drop leading dims and/or have singleton dims; it is aligned to the
    # trailing dims of a, numpy style (e.g. a bias of shape (C, 1, 1) on NCHW).
    if len(b_shape) > len(a_shape):
        return False
    for da, db in zip(a_shape[::-1], b_shape[::-1]):
        if db != da and db != 1:
            return False
    return True


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def ew_binary(a, b, kind):
    """Elementwise ``add``/``sub``/``mul``.

    ``b`` must either match ``a`` exactly or broadcast onto it: ``b`` is
    aligned to the trailing dims of ``a`` and each of its dims is either equal
    to ``a``'s or 1. The result always has ``a``'s shape.
    """
    try:
        fn = _BINARY[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape and not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"cannot {kind} shapes {a.shape} and {b.shape}")
    return check_finite(fn(a, b), kind)


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return check_finite(a @ b, "matmul")


def pad2d(x, pad, value=0.0):
    """Pad the two trailing (spatial) dims of an NCHW tensor by ``pad`` on each side."""
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    x = np.asarray(x)
    if pad == 0:
        return x.copy()
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths, mode="constant", constant_values=value)


def crop2d(x, pad):
    if pad == 0:
        return x
    return x[..., pad:-pad, pad:-pad]


def write_tensor(fh, x):
    """Write ``x`` to a binary file handle in the tensor serialization format."""
    x = np.ascontiguousarray(x, dtype="<f4")
    fh.write(_U32.pack(x.ndim))
    for d in x.shape:
        fh.write(_U32.pack(d))
    fh.write(x.tobytes(order="C"))


def read_tensor(fh):
    head = fh.read(4)
    if len(head) != 4:
        raise EOFError("no tensor header")
    (rank,) = _U32.unpack(head)
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(dims)


def tensor_to_bytes(x):
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def tensor_from_bytes(data):
    return read_tensor(io.BytesIO(data))
