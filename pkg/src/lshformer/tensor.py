"""Dense numeric substrate: shaped float arrays with allocation metering.

Everything downstream (attention, reversible blocks, the model) moves its
float data through the ``Tensor`` wrapper defined here so that a ``MemMeter``
can observe peak live float counts. Integer index arrays and boolean masks
stay plain numpy; the meter counts floats only.

The default precision is float32. Gradient checks switch the whole engine to
float64 via ``default_dtype("float64")``.

RNG: all randomness comes from numpy's Philox counter-based generator keyed
by ``SeedSequence(seed, spawn_key=stream)``, so (seed, stream) -> values is
stable across platforms and runs.
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

DEFAULT_LAYER_NORM_EPS = 1e-6

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def default_dtype(name: str):
    """Temporarily switch the engine-wide default float precision."""
    prev = get_default_dtype().name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(prev)


class MemMeter:
    """Counts live floats held by Tensors allocated while the meter is active.

    ``peak_live_floats`` is monotone nondecreasing within a scope. Parameter
    tensors and their gradient accumulators are conventionally allocated
    outside meter scopes (or under ``unmetered()``), so the meter measures
    activation storage.
    """

    def __init__(self):
        self.current_live_floats = 0
        self.peak_live_floats = 0

    def alloc(self, n: int) -> None:
        self.current_live_floats += n
        if self.current_live_floats > self.peak_live_floats:
            self.peak_live_floats = self.current_live_floats

    def free(self, n: int) -> None:
        self.current_live_floats -= n

    def reset(self) -> None:
        self.current_live_floats = 0
        self.peak_live_floats = 0


_active_meter: MemMeter | None = None
_meter_muted = False


def meter_scope(meter: MemMeter, fn, *args, **kwargs):
    """Run ``fn`` with ``meter`` active; returns ``(result, peak_floats)``."""
    global _active_meter
    prev = _active_meter
    _active_meter = meter
    try:
        result = fn(*args, **kwargs)
    finally:
        _active_meter = prev
    return result, meter.peak_live_floats


@contextmanager
def unmetered():
    """Suppress meter accounting for allocations inside the block."""
    global _meter_muted
    prev = _meter_muted
    _meter_muted = True
    try:
        yield
    finally:
        _meter_muted = prev


class Tensor:
    """Contiguous row-major float array with shape metadata.

    Immutable by convention once handed out of an op; only the optimizer and
    explicitly in-place helpers mutate ``data``.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data: np.ndarray):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=_default_dtype)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        meter = _active_meter
        if meter is not None and not _meter_muted and data.dtype.kind == "f":
            n = int(data.size)
            meter.alloc(n)
            weakref.finalize(self, meter.free, n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor(np.ascontiguousarray(self.data.reshape(shape)))

    def __getitem__(self, idx) -> "Tensor":
        return Tensor(np.ascontiguousarray(self.data[idx]))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # arithmetic; scalars and Tensors only
    def __add__(self, other):
        return Tensor(self.data + _raw(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Tensor(self.data - _raw(other))

    def __rsub__(self, other):
        return Tensor(_raw(other) - self.data)

    def __mul__(self, other):
        return Tensor(self.data * _raw(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Tensor(self.data / _raw(other))

    def __rtruediv__(self, other):
        return Tensor(_raw(other) / self.data)

    def __neg__(self):
        return Tensor(-self.data)

    def __matmul__(self, other):
        return matmul(self, other)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def tensor(values, dtype=None) -> Tensor:
    """Create a Tensor from array-like values in the default (or given) dtype."""
    arr = np.asarray(values)
    if arr.dtype.kind in "fiub":
        arr = arr.astype(dtype or _default_dtype)
    return Tensor(arr)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype))


def full(shape, value, dtype=None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype or _default_dtype))


def rng_stream(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the given seed and stream key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seed=ss))


def randn(rng: np.random.Generator, shape, dtype=None) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype or _default_dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch prefixes must be equal or 1."""
    ad, bd = _raw(a), _raw(b)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ValueError(f"matmul shape mismatch: {ad.shape} x {bd.shape}") from exc
    return Tensor(out)


def matmul_rowstable(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product whose per-row results do not depend on how the rows
    are partitioned across calls (plain einsum; no BLAS shape dispatch)."""
    ad, bd = _raw(a), _raw(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    return Tensor(np.einsum("ik,kj->ij", ad, bd, optimize=False))


def swap_last(x: Tensor) -> Tensor:
    return Tensor(np.ascontiguousarray(np.swapaxes(_raw(x), -1, -2)))


def concat(parts, axis: int) -> Tensor:
    return Tensor(np.concatenate([_raw(p) for p in parts], axis=axis))


def exp(x: Tensor) -> Tensor:
    return Tensor(np.exp(_raw(x)))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(_raw(x)))


def sqrt(x: Tensor) -> Tensor:
    return Tensor(np.sqrt(_raw(x)))


def tanh(x: Tensor) -> Tensor:
    return Tensor(np.tanh(_raw(x)))


def maximum(a, b) -> Tensor:
    return Tensor(np.maximum(_raw(a), _raw(b)))


def where(cond: np.ndarray, a, b) -> Tensor:
    return Tensor(np.where(cond, _raw(a), _raw(b)))


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    return Tensor(np.sum(_raw(x), axis=axis, keepdims=keepdims))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return Tensor(np.mean(_raw(x), axis=axis, keepdims=keepdims))


def amax(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return Tensor(np.max(_raw(x), axis=axis, keepdims=keepdims))


def logsumexp(x: Tensor, axis: int) -> Tensor:
    """log(sum(exp)) by max subtraction; rows of all -inf give -inf, not nan."""
    xd = _raw(x)
    if xd.shape[axis] < 1:
        raise ValueError(f"logsumexp over empty axis {axis} of shape {xd.shape}")
    m = np.max(xd, axis=axis, keepdims=True)
    finite = np.isfinite(m)
    safe_m = np.where(finite, m, 0.0)
    s = np.sum(np.exp(xd - safe_m), axis=axis, keepdims=True)
    out = np.where(finite, safe_m + np.log(s), m)
    return Tensor(np.squeeze(out, axis=axis))


@dataclass(frozen=True)
class Permutation:
    """Bijection on 0..l-1 stored as ``indices[rank] = original position``."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.indices)
        inv[self.indices] = np.arange(len(self), dtype=np.int64)
        return Permutation(inv)


def stable_sort_perm(keys) -> Permutation:
    """Permutation putting ``keys`` in nondecreasing order; ties keep their
    original relative order (mergesort/stable)."""
    keys = np.asarray(keys)
    if keys.ndim != 1 or keys.shape[0] < 1:
        raise ValueError(f"stable_sort_perm expects a nonempty 1-D key array, got shape {keys.shape}")
    return Permutation(np.argsort(keys, kind="stable").astype(np.int64))


def gather(x: Tensor, perm: Permutation, axis: int) -> Tensor:
    """Reorder ``x`` so slot r along ``axis`` holds slice perm.indices[r]."""
    return Tensor(np.ascontiguousarray(np.take(_raw(x), perm.indices, axis=axis)))


def scatter(x: Tensor, perm: Permutation, axis: int) -> Tensor:
    """Inverse of ``gather`` with the same permutation."""
    return gather(x, perm.inverse(), axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = DEFAULT_LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    xd = _raw(x)
    mu = np.mean(xd, axis=-1, keepdims=True)
    cen = xd - mu
    var = np.mean(cen * cen, axis=-1, keepdims=True)
    xhat = cen / np.sqrt(var + eps)
    return Tensor(xhat * _raw(gamma) + _raw(beta))


def layer_norm_vjp(x: Tensor, gamma: Tensor, dy: Tensor, eps: float = DEFAULT_LAYER_NORM_EPS):
    """Gradients of layer_norm; recomputes the cheap per-position statistics."""
    xd, gd, dyd = _raw(x), _raw(gamma), _raw(dy)
    d = xd.shape[-1]
    mu = np.mean(xd, axis=-1, keepdims=True)
    cen = xd - mu
    var = np.mean(cen * cen, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = cen * inv
    dxhat = dyd * gd
    dgamma = np.sum(dyd * xhat, axis=tuple(range(xd.ndim - 1)))
    dbeta = np.sum(dyd, axis=tuple(range(xd.ndim - 1)))
    dx = inv * (dxhat - np.mean(dxhat, axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return Tensor(dx), Tensor(dgamma), Tensor(dbeta)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    xd = _raw(x)
    return Tensor(0.5 * xd * (1.0 + np.tanh(_GELU_C * (xd + _GELU_A * xd * xd * xd))))


def gelu_vjp(x: Tensor, dy: Tensor) -> Tensor:
    xd, dyd = _raw(x), _raw(dy)
    u = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
    return Tensor(dyd * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(_raw(x), 0.0))


def relu_vjp(x: Tensor, dy: Tensor) -> Tensor:
    return Tensor(_raw(dy) * (_raw(x) > 0))
