"""A small reverse-mode autodiff engine over 2-D float64 arrays.

Every value is a matrix; scalars are (1, 1) and vectors are single rows.
Operations record their inputs and a gradient closure on the output node,
and ``backward`` replays those closures in reverse topological order
(iteratively, so deep unrolled loops cannot overflow the Python stack).
Gradients accumulate across repeated backward calls until ``zero_grad``,
which lets a training step push many per-example losses through one set of
parameters without keeping every tape alive at once.
"""
from __future__ import annotations

import math
import struct
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """An operand's shape does not fit the operation."""


class MaskError(ValueError):
    """A mask blocks every choice, or blocks the required target."""


class DetachedError(ValueError):
    """backward() was called on a value with no recorded tape."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or from an unknown layout."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A 2-D float64 matrix, optionally tracked by the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are strictly 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, grad={self.grad is not None})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording the tape only when it can matter."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        return out
    return Tensor(data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # never add in place: parents can appear in several ops of one tape
    t.grad = g if t.grad is None else t.grad + g


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1):
        return  # single-row operand broadcast down the rows
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not align")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


# ------------------------------------------------------------ arithmetic ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "add")
    out_data = a.data + b.data

    def backward(out: Tensor) -> None:
        _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    return _result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "mul")
    out_data = a.data * b.data

    def backward(out: Tensor) -> None:
        _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _result(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(out: Tensor) -> None:
        _accumulate(a, out.grad * s)

    return _result(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(out: Tensor) -> None:
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    return _result(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(out: Tensor) -> None:
        _accumulate(a, out.grad.T)

    return _result(a.data.T.copy(), (a,), backward)


# ------------------------------------------------------------ structural ops

def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    cols = parts[0].data.shape[1]
    if any(p.data.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    row_counts = [p.data.shape[0] for p in parts]

    def backward(out: Tensor) -> None:
        at = 0
        for p, rows in zip(parts, row_counts):
            _accumulate(p, out.grad[at : at + rows])
            at += rows

    return _result(out_data, tuple(parts), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    col_counts = [p.data.shape[1] for p in parts]

    def backward(out: Tensor) -> None:
        at = 0
        for p, cols in zip(parts, col_counts):
            _accumulate(p, out.grad[:, at : at + cols])
            at += cols

    return _result(out_data, tuple(parts), backward)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    """Row-major reshape; the element count must be preserved."""
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: {a.data.shape} has no ({rows}, {cols}) view")
    out_data = a.data.reshape(rows, cols)

    def backward(out: Tensor) -> None:
        _accumulate(a, out.grad.reshape(a.data.shape))

    return _result(out_data.copy(), (a,), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows wants a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError("take_rows: index out of range")
    out_data = a.data[idx]

    def backward(out: Tensor) -> None:
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)  # repeated rows accumulate
        _accumulate(a, g)

    return _result(out_data, (a,), backward)


# ------------------------------------------------------------ nonlinearities

def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(out: Tensor) -> None:
        _accumulate(a, out.grad * (a.data > 0.0))

    return _result(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(out: Tensor) -> None:
        _accumulate(a, out.grad * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=1, keepdims=True))


def row_softmax(a: Tensor) -> Tensor:
    out_data = _softmax_rows(a.data)

    def backward(out: Tensor) -> None:
        _accumulate(a, _softmax_backward(out_data, out.grad))

    return _result(out_data, (a,), backward)


def masked_row_softmax(a: Tensor, keep: np.ndarray) -> Tensor:
    """Row softmax over the kept entries only; blocked entries are exact 0.

    ``keep`` is a boolean array of the same shape.  A row with nothing kept
    has no valid normalization: MaskError.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.data.shape:
        raise ShapeError(f"mask shape {keep.shape} != logits shape {a.data.shape}")
    if not keep.any(axis=1).all():
        raise MaskError("a row blocks every entry")
    z = np.where(keep, a.data, -np.inf)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted, where=keep, out=np.zeros_like(a.data))
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(out: Tensor) -> None:
        # blocked entries have p = 0, so they get exactly zero gradient
        _accumulate(a, _softmax_backward(out_data, out.grad))

    return _result(out_data, (a,), backward)


def standardize_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Shift each row to mean 0 and scale it to unit variance."""
    mu = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mu
    sigma = np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    out_data = centered / sigma

    def backward(out: Tensor) -> None:
        g = out.grad
        m = a.data.shape[1]
        dot = (g * out_data).sum(axis=1, keepdims=True) / m
        _accumulate(a, (g - g.mean(axis=1, keepdims=True) - out_data * dot) / sigma)

    return _result(out_data, (a,), backward)


# --------------------------------------------------------------- reductions

def tsum(a: Tensor) -> Tensor:
    def backward(out: Tensor) -> None:
        _accumulate(a, np.full_like(a.data, float(out.grad[0, 0])))

    return _result(np.array([[a.data.sum()]]), (a,), backward)


def tmean(a: Tensor) -> Tensor:
    size = a.data.size

    def backward(out: Tensor) -> None:
        _accumulate(a, np.full_like(a.data, float(out.grad[0, 0]) / size))

    return _result(np.array([[a.data.mean()]]), (a,), backward)


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """Negative log of the target entry of a probability row."""
    if probs.data.shape[0] != 1:
        raise ShapeError("cross_entropy expects a single probability row")
    if not 0 <= target < probs.data.shape[1]:
        raise ShapeError(f"target {target} outside row of {probs.data.shape[1]}")
    p = probs.data[0, target]
    if p <= 0.0:
        raise MaskError(f"target {target} has zero probability")

    def backward(out: Tensor) -> None:
        g = np.zeros_like(probs.data)
        g[0, target] = -float(out.grad[0, 0]) / p
        _accumulate(probs, g)

    return _result(np.array([[-math.log(p)]]), (probs,), backward)


def cross_entropy_rows(probs: Tensor, targets, weights) -> Tensor:
    """Weighted sum of per-row negative log-likelihoods as one tape node.

    Row t contributes ``-weights[t] * log(probs[t, targets[t]])``.  This is
    the batched counterpart of cross_entropy; the weights fold per-episode
    averaging into the node so a whole batch reduces to a single scalar.
    """
    idx = np.asarray(targets, dtype=np.intp)
    w = np.asarray(weights, dtype=np.float64)
    rows = probs.data.shape[0]
    if idx.shape != (rows,) or w.shape != (rows,):
        raise ShapeError(f"need {rows} targets and weights, "
                         f"got {idx.shape} and {w.shape}")
    if rows == 0:
        raise ShapeError("cross_entropy_rows of an empty batch")
    if idx.min() < 0 or idx.max() >= probs.data.shape[1]:
        raise ShapeError("a target lies outside its probability row")
    picked = probs.data[np.arange(rows), idx]
    if (picked <= 0.0).any():
        bad = int(np.argmax(picked <= 0.0))
        raise MaskError(f"target {idx[bad]} in row {bad} has zero probability")

    def backward(out: Tensor) -> None:
        g = np.zeros_like(probs.data)
        g[np.arange(rows), idx] = -w * float(out.grad[0, 0]) / picked
        _accumulate(probs, g)

    return _result(np.array([[-(w * np.log(picked)).sum()]]), (probs,), backward)


# ------------------------------------------------------------ fused attention

def attention(q: Tensor, k: Tensor, v: Tensor, scale_dim: int,
              keep: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(scale_dim)) v as one tape node.

    Functionally identical to composing matmul/scale/softmax, but records a
    single node with a hand-written gradient, which keeps long decoding
    tapes short.  ``keep`` optionally masks attention targets per query row.
    """
    if q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(f"attention: query dim {q.data.shape} vs key dim {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"attention: {k.data.shape[0]} keys vs {v.data.shape[0]} values")
    inv = 1.0 / math.sqrt(scale_dim)
    logits = (q.data @ k.data.T) * inv
    if keep is None:
        p = _softmax_rows(logits)
    else:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != logits.shape:
            raise ShapeError(f"attention mask {keep.shape} != logits {logits.shape}")
        if not keep.any(axis=1).all():
            raise MaskError("a query row blocks every attention target")
        z = np.where(keep, logits, -np.inf)
        e = np.exp(z - z.max(axis=1, keepdims=True), where=keep, out=np.zeros_like(z))
        p = e / e.sum(axis=1, keepdims=True)
    out_data = p @ v.data

    def backward(out: Tensor) -> None:
        g = out.grad
        gp = g @ v.data.T
        ga = _softmax_backward(p, gp)
        _accumulate(v, p.T @ g)
        _accumulate(q, (ga @ k.data) * inv)
        _accumulate(k, (ga.T @ q.data) * inv)

    return _result(out_data, (q, k, v), backward)


def block_attention(q: Tensor, k: Tensor, v: Tensor, scale_dim: int,
                    block: int, keep: np.ndarray) -> Tensor:
    """Self-contained attention within consecutive row blocks of equal size.

    The rows of q, k and v split into blocks of ``block`` rows; each query
    row attends only to rows of its own block, so one call scores many small
    attention problems batched.  ``keep`` is (rows, block): per query row,
    which members of its block are admissible targets.  Exact zeros and the
    MaskError contract match ``attention``.
    """
    rows, dq = q.data.shape
    if k.data.shape != (rows, dq):
        raise ShapeError(f"block_attention: query {q.data.shape} vs key {k.data.shape}")
    if v.data.shape[0] != rows:
        raise ShapeError(f"block_attention: {rows} keys vs {v.data.shape[0]} values")
    if block <= 0 or rows % block:
        raise ShapeError(f"{rows} rows do not split into blocks of {block}")
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (rows, block):
        raise ShapeError(f"block mask {keep.shape}, wanted {(rows, block)}")
    if not keep.any(axis=1).all():
        raise MaskError("a query row blocks every attention target")
    s = rows // block
    inv = 1.0 / math.sqrt(scale_dim)
    q3 = q.data.reshape(s, block, dq)
    kt = k.data.reshape(s, block, dq).transpose(0, 2, 1)
    v3 = v.data.reshape(s, block, -1)
    keep3 = keep.reshape(s, block, block)
    z = (q3 @ kt) * inv
    z = np.where(keep3, z, -np.inf)
    e = np.exp(z - z.max(axis=2, keepdims=True), where=keep3, out=np.zeros_like(z))
    p = e / e.sum(axis=2, keepdims=True)
    out_data = (p @ v3).reshape(rows, -1)

    def backward(out: Tensor) -> None:
        g3 = out.grad.reshape(s, block, -1)
        gp = g3 @ v3.transpose(0, 2, 1)
        ga = p * (gp - (gp * p).sum(axis=2, keepdims=True))
        _accumulate(v, (p.transpose(0, 2, 1) @ g3).reshape(rows, -1))
        _accumulate(q, ((ga @ kt.transpose(0, 2, 1)) * inv).reshape(rows, dq))
        _accumulate(k, ((ga.transpose(0, 2, 1) @ q3) * inv).reshape(rows, dq))

    return _result(out_data, (q, k, v), backward)


# ----------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent._backward is not None:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(loss * seed)/d(leaf) into every reachable ``grad``.

    ``seed`` folds loss weights (batch averaging, advantages) into the
    pass, so callers can sum many weighted losses without building an
    arithmetic tree over them.
    """
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward needs a (1, 1) loss, got {loss.data.shape}")
    if loss._backward is None:
        raise DetachedError("loss has no tape (built under no_grad or from constants)")
    order = _topo_order(loss)
    loss.grad = np.array([[float(seed)]]) if loss.grad is None else loss.grad + seed
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    # intermediate grads are one-shot; free them, keeping only leaf grads
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------- grad check

def grad_check(build, params, eps: float = 1e-5) -> float:
    """Largest relative disagreement between the tape and central differences.

    ``build`` recomputes the scalar loss from the current parameter data;
    ``params`` are the leaves to probe, element by element.
    """
    zero_grad(params)
    backward(build())
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for p, g in zip(params, grads):
            it = np.nditer(p.data, flags=["multi_index"])
            for _ in it:
                ij = it.multi_index
                saved = p.data[ij]
                p.data[ij] = saved + eps
                hi = float(build().data[0, 0])
                p.data[ij] = saved - eps
                lo = float(build().data[0, 0])
                p.data[ij] = saved
                numeric = (hi - lo) / (2.0 * eps)
                analytic = float(g[ij])
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
                worst = max(worst, rel)
    zero_grad(params)
    return worst


# -------------------------------------------------------- binary checkpoints

_MAGIC = b"VLTS"
_VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named float64 matrices as one little-endian binary blob."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(named)))
        for name, value in named.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _take(blob: bytes, at: int, nbytes: int) -> int:
    if at + nbytes > len(blob):
        raise CheckpointError("truncated checkpoint")
    return at + nbytes


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError("not a tensor checkpoint")
    at = _take(blob, 4, 8)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        end = _take(blob, at, 4)
        (name_len,) = struct.unpack_from("<I", blob, at)
        at, end = end, _take(blob, end, name_len)
        name = blob[at:end].decode("utf-8")
        at, end = end, _take(blob, end, 4)
        (ndim,) = struct.unpack_from("<I", blob, at)
        at, end = end, _take(blob, end, 4 * ndim)
        dims = struct.unpack_from(f"<{ndim}I", blob, at)
        size = int(np.prod(dims)) if ndim else 1
        at, end = end, _take(blob, end, 8 * size)
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=at)
        out[name] = data.reshape(dims).astype(np.float64)
        at = end
    if at != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    return out
