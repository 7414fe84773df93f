"""Minimal reverse-mode autodiff over float64 numpy arrays.

Operations are recorded eagerly onto the active :class:`Tape` (entered with a
``with Tape():`` block).  Outside a tape nothing is recorded, which is the
cheap path used for evaluation.  ``backward(loss)`` replays the loss's tape in
reverse and accumulates into ``.grad`` of every leaf tensor that has
``requires_grad=True``.

Shapes are explicit: elementwise ops require identical shapes, the only
broadcast is a per-row vector (norm weights).
"""

import threading
import weakref

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError, TokenIndexError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_id = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.item())

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered operation records for one computation.

    Records are appended in execution order, so the list is topologically
    sorted by construction.  A tape must not be shared between threads.
    Tensors refer to their tape weakly: call ``backward`` inside the ``with``
    block or keep a reference to the tape.
    """

    _local = threading.local()

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    stack = getattr(Tape._local, "stack", None)
    return stack[-1] if stack else None


def _emit(op, inputs, out_data, backward):
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = len(tape.records)
        out._tape = weakref.ref(tape)  # weak: records already hold the tensors
        tape.records.append(Record(op, inputs, out, backward))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- ops


def matmul(a, b):
    """``a @ b`` for 2-d operands, or batched 3-d operands with equal batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    ok = (a.data.ndim == b.data.ndim == 2 and sa[1] == sb[0]) or (
        a.data.ndim == b.data.ndim == 3 and sa[0] == sb[0] and sa[2] == sb[1]
    )
    if not ok:
        raise ShapeError(f"matmul shape mismatch: {sa} x {sb}")
    A, B = a.data, b.data

    def backward(g):
        if A.ndim == 2:
            return g @ B.T, A.T @ g
        return g @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g

    return _emit("matmul", (a, b), A @ B, backward)


def linear(x, w):
    """``x @ w.T`` with ``w`` stored as [out x in]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shape mismatch: x{x.shape} w{w.shape}")
    X, W = x.data, w.data

    def backward(g):
        return g @ W, g.T @ X

    return _emit("linear", (x, w), X @ W.T, backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def total(a):
    """Sum of all elements, as a 0-d tensor."""
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, np.asarray(g).item()),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)), lambda g: (g.transpose(inv),))


def take_rows(table, idx):
    """Gather rows of a 2-d table (embedding lookup)."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TokenIndexError(f"row index out of range [0, {n})")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("take_rows", (table,), table.data[idx], backward)


def rms_norm(x, weight, eps=1e-6):
    """``weight * x / sqrt(mean(x**2) + eps)`` over the trailing axis."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ShapeError("rms_norm over an empty axis")
    if weight.shape != (d,):
        raise ShapeError(f"rms_norm weight {weight.shape} does not match trailing dim {d}")
    if eps < 0:
        raise ContractError(f"rms_norm eps must be >= 0, got {eps}")
    shape = x.shape
    X = x.data.reshape(-1, d)
    W = weight.data
    y, inv = kernels.rmsnorm_fwd(X, W, float(eps))

    def backward(g):
        gx, gw = kernels.rmsnorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), X, W, inv)
        return gx.reshape(shape), gw

    return _emit("rms_norm", (x, weight), y.reshape(shape), backward)


def swiglu(gate_out, up_out):
    """``silu(gate_out) * up_out`` with ``silu(z) = z / (1 + exp(-z))``."""
    g, u = _as_tensor(gate_out), _as_tensor(up_out)
    if g.shape != u.shape:
        raise ShapeError(f"swiglu shape mismatch: {g.shape} vs {u.shape}")
    G, U = g.data, u.data
    y, s = kernels.swiglu_fwd(G, U)

    def backward(gy):
        return kernels.swiglu_bwd(np.ascontiguousarray(gy), G, U, s)

    return _emit("swiglu", (g, u), y, backward)


def softmax(x, causal_mask=False, mask=None):
    """Softmax over the last axis.

    ``causal_mask`` hides position j from row i when j > i (last two axes).
    ``mask`` is an optional boolean array of allowed positions.  A row with
    no allowed position is an error.
    """
    x = _as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty trailing axis")
    shape = x.shape
    n = shape[-1]
    rows = shape[-2] if x.data.ndim >= 2 else 1
    X = x.data.reshape(-1, rows, n)
    allowed = None
    if causal_mask:
        allowed = np.tril(np.ones((rows, n), dtype=bool))[None]
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), shape).reshape(-1, rows, n)
        allowed = m if allowed is None else (allowed & m)
    if allowed is not None:
        allowed = np.ascontiguousarray(np.broadcast_to(allowed, X.shape))
        if not allowed.any(axis=-1).all():
            raise ContractError("softmax row has every position masked")
    p = kernels.softmax_fwd(np.ascontiguousarray(X), allowed)

    def backward(g):
        return (kernels.softmax_bwd(np.ascontiguousarray(g.reshape(p.shape)), p).reshape(shape),)

    return _emit("softmax", (x,), p.reshape(shape), backward)


def cross_entropy(logits, targets):
    """Mean over rows of ``-log softmax(logits)[row, target]``."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).ravel()
    if logits.data.ndim != 2 or logits.shape[0] != t.size:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {t.size} targets")
    n, v = logits.shape
    if n == 0:
        raise ShapeError("cross_entropy over zero rows")
    if t.min() < 0 or t.max() >= v:
        raise TokenIndexError(f"target out of range [0, {v})")
    X = logits.data
    m = X.max(axis=1, keepdims=True)
    z = X - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def backward(g):
        gx = np.exp(logp)
        gx[rows, t] -= 1.0
        return (gx * (np.asarray(g).item() / n),)

    return _emit("cross_entropy", (logits,), np.array(loss), backward)


# ---------------------------------------------------------------- backward


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape() if loss._tape is not None else None
    if tape is None:
        raise ContractError("loss was not recorded on a live tape (no parameter requires grad, "
                            "or the tape was released before backward)")
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss.tape_id + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is not None and inp._tape() is tape:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64, copy=True).reshape(inp.shape)
            else:
                inp.grad += gi.reshape(inp.shape)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f(x)`` w.r.t. every element of ``x``.

    ``x.data`` is perturbed in place and restored exactly.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    flat = x.data.reshape(-1)
    out = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = np.asarray(_value(f(x))).item()
        flat[k] = orig - h
        fm = np.asarray(_value(f(x))).item()
        flat[k] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(x.shape))


def _value(v):
    return v.data if isinstance(v, Tensor) else v
