"""Tape-based reverse-mode differentiation.

Ops executed inside ``with Tape() as tape:`` are recorded in creation order;
``tape.backward(loss)`` walks them in exact reverse order. Outside a tape the
same ops run without recording, which is what evaluation uses.

Parameter gradients accumulate across backward calls until
:func:`zero_grads` is called. Intermediate node gradients are reset at the
start of every backward pass.
"""

import threading
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, ShapeError

_local = threading.local()


def current_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Node:
    """A value in the computation graph.

    ``vjp`` maps the gradient of this node's output to a tuple of gradients,
    one per input (``None`` where an input gets nothing).
    """

    __slots__ = ("value", "grad", "inputs", "vjp", "op", "requires_grad")

    def __init__(self, value, inputs=(), vjp=None, op="leaf", requires_grad=False):
        self.value = value
        self.grad = None
        self.inputs = inputs
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"{type(self).__name__}(op={self.op!r}, shape={self.value.shape})"


class Parameter(Node):
    """Trainable leaf whose gradient accumulates across backward passes."""

    __slots__ = ("name",)

    def __init__(self, value, name=""):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(value)


def constant(value):
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value))


def zero_grads(params):
    for p in params:
        if p.grad is None or p.grad.shape != p.value.shape or p.grad.dtype != p.value.dtype:
            p.grad = np.zeros_like(p.value)
        else:
            p.grad.fill(0)


class Tape:
    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, node):
        self.nodes.append(node)
        return node

    def backward(self, loss):
        backward(self, loss)


def forward_record(op, value, inputs, vjp):
    """Wrap an op result in a :class:`Node`, appending it to the active tape.

    Without an active tape (or when no input needs a gradient) the node is
    returned unrecorded and its ``vjp`` closure is dropped.
    """
    inputs = tuple(inputs)
    needs = any(i.requires_grad for i in inputs)
    tape = current_tape()
    if tape is None or not needs:
        return Node(value, op=op)
    node = Node(value, inputs, vjp, op, requires_grad=True)
    return tape.record(node)


def flush_subnormal(g):
    """Zero subnormal entries in place.

    Near-zero losses push gradients into the subnormal range, where BLAS
    throughput collapses by an order of magnitude; such values are far below
    anything an f32 parameter update can register.
    """
    if g.dtype.kind == "f":
        np.putmask(g, np.abs(g) < np.finfo(g.dtype).tiny, 0)
    return g


def backward(tape, loss):
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        grads = node.vjp(flush_subnormal(node.grad))
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.value.shape:
                raise ShapeError(f"{node.op}: gradient shape {g.shape} != input {inp.value.shape}")
            if inp.grad is None:
                inp.grad = np.array(g, dtype=inp.value.dtype)
            else:
                inp.grad += g


# ----------------------------------------------------------------------
# elementary differentiable ops
# ----------------------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, d in enumerate(shape):
        if d == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = constant(a), constant(b)
    out = a.value + b.value
    return forward_record(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = constant(a), constant(b)
    out = a.value - b.value
    return forward_record(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return forward_record(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(a, c):
    a = constant(a)
    return forward_record("scale", a.value * c, (a,), lambda g: (g * c,))


def sum_all(a):
    a = constant(a)
    shape = a.shape
    return forward_record(
        "sum", np.asarray(a.value.sum()), (a,),
        lambda g: (np.broadcast_to(g, shape).astype(a.value.dtype),),
    )


def reshape(a, shape):
    a = constant(a)
    old = a.shape
    return forward_record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    worst: tuple = ()
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:g} checked={self.n_checked}"


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(model, input_batch=None, eps=1e-5, tol=1e-3, params=None,
               dtype=np.float64, floor=1e-6, max_per_param=None, rng=None):
    """Compare analytic gradients with central differences.

    ``model`` is either a zero-argument callable returning a scalar loss node
    (``params`` must then list the :class:`Parameter` leaves to check), or an
    object with ``parameters()`` and ``loss(x, y)``, in which case
    ``input_batch`` is ``(x, y)``.

    The check runs on a copy of every parameter cast to ``dtype`` (float64 by
    default; float32 central differences are dominated by rounding) and
    restores the originals afterwards. ``max_per_param`` samples that many
    entries per parameter instead of checking all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    restore_state = None
    if callable(model) and not hasattr(model, "loss"):
        loss_fn = model
        if params is None:
            raise ValueError("params must be given when model is a callable")
    else:
        x, y = input_batch
        params = list(model.parameters()) if params is None else params
        if dtype is not None:
            x = np.asarray(x, dtype=dtype)
        restore_state = model.state_dict() if hasattr(model, "state_dict") else None

        def loss_fn():
            return model.loss(x, y)

    originals = [p.value for p in params]
    if dtype is not None:
        for p in params:
            p.value = p.value.astype(dtype)
    gen = np.random.default_rng(0 if rng is None else rng)
    try:
        zero_grads(params)
        with Tape() as tape:
            loss = loss_fn()
        tape.backward(loss)
        analytic = [p.grad.copy() for p in params]

        def evaluate():
            return float(loss_fn().value)

        worst, max_err, n = (), 0.0, 0
        errors = {}
        for pi, p in enumerate(params):
            flat = p.value.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = gen.choice(flat.size, size=max_per_param, replace=False)
            num = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = evaluate()
                flat[i] = orig - eps
                fm = evaluate()
                flat[i] = orig
                num[k] = (fp - fm) / (2 * eps)
            err = relative_error(analytic[pi].reshape(-1)[idx], num, floor)
            n += len(idx)
            name = getattr(p, "name", "") or f"param{pi}"
            errors[name] = float(err.max()) if err.size else 0.0
            if err.size and err.max() > max_err:
                j = int(err.argmax())
                max_err = float(err[j])
                worst = (name, int(idx[j]))
    finally:
        for p, v in zip(params, originals):
            p.value = v
        zero_grads(params)
        if restore_state is not None:
            model.load_state_dict(restore_state)
    return GradCheckReport(max_err, tol, n, worst, errors)
