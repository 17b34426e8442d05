"""
autodiff.py - Minimal dense-tensor engine with reverse-mode differentiation

This module provides the tape every model computation runs on:
- Tensor: a numpy array plus the node handle the tape knows it by
- GradTape: append-only record of primitive applications; backward() walks it
  in reverse and accumulates vector-Jacobian products
- A table of primitives (forward + backward pairs) covering what the hybrid
  model needs: contractions, elementwise math, squared ReLU, RMSNorm, softmax,
  cross-entropy, forward KL, gather/slice/concat, cumulative and segmented
  sums, causal depthwise convolution, rotary embedding, and the sequential
  selective scan
- ssd_chunked: the chunked form of the selective scan, composed from
  primitives so it is differentiable for free
- finite_difference_gradient: central-difference oracle for gradient checks

Architecture:
- Every forward result is checked for NaN/Inf; a non-finite value is an error
- A tape with record=False evaluates primitives without keeping anything
  (evaluation, decoding, importance scoring)
- Broadcasting is one-sided: one operand may broadcast onto the other using
  right-aligned dimensions equal or 1; anything else needs an explicit reshape
- Tapes are confined to a single worker; independent tapes may run in parallel
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from common import LOG_LEVEL, NonFiniteError, ShapeError
from fp8 import (
    ACTIVATION_FORMAT,
    GRADIENT_FORMAT,
    WEIGHT_FORMAT,
    Precision,
    dequantize,
    fake_quantize,
    qgemm,
    quantize,
)

logger = logging.getLogger(__name__)
logger.setLevel(LOG_LEVEL)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


# ===============================================
# TENSORS AND TAPE
# ===============================================

class Tensor:
    """A value produced on (or registered with) a GradTape."""

    __slots__ = ("data", "id", "requires_grad")

    def __init__(self, data: np.ndarray, node_id: int, requires_grad: bool = False):
        self.data = data
        self.id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    kind: str
    input_ids: Tuple[int, ...]
    output_ids: Tuple[int, ...]
    inputs: Tuple[np.ndarray, ...]
    output_shapes: Tuple[Tuple[int, ...], ...]
    saved: Any
    attrs: Dict[str, Any]


@dataclass(frozen=True)
class Primitive:
    kind: str
    forward: Callable[..., Tuple[Any, Any]]
    backward: Callable[..., List[Optional[np.ndarray]]]
    n_outputs: int = 1


PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(kind: str, forward: Callable, backward: Callable, n_outputs: int = 1) -> None:
    PRIMITIVES[kind] = Primitive(kind, forward, backward, n_outputs)


class GradTape:
    """
    Append-only record of primitive applications.

    Args:
        dtype: Element type for leaves and constants (float32 by default,
            float64 for gradient oracles)
        record: When False, primitives run but nothing is kept and
            backward() is unavailable
    """

    def __init__(self, dtype: Any = np.float32, record: bool = True):
        self.dtype = np.dtype(dtype)
        self.record = record
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._next_id = 0
        self._leaves: Dict[int, Tensor] = {}

    def _new_id(self) -> int:
        node_id = self._next_id
        self._next_id += 1
        return node_id

    # ---- leaves ----

    def leaf(self, data: ArrayLike, requires_grad: bool = True) -> Tensor:
        """Register an input; gradients are reported for leaves with requires_grad."""
        arr = np.array(data, dtype=self.dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf holds non-finite values")
        t = Tensor(arr, self._new_id(), requires_grad=requires_grad and self.record)
        if t.requires_grad:
            self._leaves[t.id] = t
        return t

    def constant(self, data: ArrayLike) -> Tensor:
        return self.leaf(data, requires_grad=False)

    # ---- application ----

    def apply(self, kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Union[Tensor, Tuple[Tensor, ...]]:
        """Run primitive `kind` on inputs and record it (see forward_primitive)."""
        prim = PRIMITIVES.get(kind)
        if prim is None:
            raise ValueError(f"Unknown primitive: {kind}")
        arrays = tuple(t.data for t in inputs)
        outputs, saved = prim.forward(arrays, **attrs)
        if prim.n_outputs == 1:
            outputs = (outputs,)
        for out in outputs:
            if np.issubdtype(out.dtype, np.floating) and not np.all(np.isfinite(out)):
                raise NonFiniteError(f"{kind} produced a non-finite value", primitive=kind)

        needs_grad = self.record and any(t.requires_grad for t in inputs)
        results = tuple(Tensor(out, self._new_id(), requires_grad=needs_grad) for out in outputs)
        if needs_grad:
            self.nodes.append(TapeNode(
                kind=kind,
                input_ids=tuple(t.id for t in inputs),
                output_ids=tuple(r.id for r in results),
                inputs=arrays,
                output_shapes=tuple(out.shape for out in outputs),
                saved=saved,
                attrs=attrs,
            ))
        return results[0] if prim.n_outputs == 1 else results

    # ---- convenience wrappers ----

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("add", [a, b])

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("sub", [a, b])

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("mul", [a, b])

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self.apply("scale", [a], factor=float(factor))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("matmul", [a, b])

    def einsum(self, subscripts: str, *operands: Tensor) -> Tensor:
        return self.apply("einsum", list(operands), subscripts=subscripts)

    def linear(self, x: Tensor, w: Tensor, precision: Precision = Precision.HIGH) -> Tensor:
        return self.apply("linear", [x, w], precision=Precision(precision))

    def exp(self, a: Tensor) -> Tensor:
        return self.apply("exp", [a])

    def softplus(self, a: Tensor) -> Tensor:
        return self.apply("softplus", [a])

    def silu(self, a: Tensor) -> Tensor:
        return self.apply("silu", [a])

    def squared_relu(self, a: Tensor) -> Tensor:
        return self.apply("squared_relu", [a])

    def rmsnorm(self, x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
        return self.apply("rmsnorm", [x, gain], eps=float(eps))

    def softmax(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.apply("softmax", [x], mask=mask)

    def log_softmax(self, x: Tensor) -> Tensor:
        return self.apply("log_softmax", [x])

    def cross_entropy(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        return self.apply("cross_entropy", [logits], targets=np.asarray(targets, dtype=np.int64))

    def forward_kl(self, student_logits: Tensor, teacher_logits: np.ndarray, temperature: float = 1.0) -> Tensor:
        return self.apply("forward_kl", [student_logits],
                          teacher_logits=np.asarray(teacher_logits, dtype=np.float64),
                          temperature=float(temperature))

    def sum(self, a: Tensor, axis: Optional[int] = None) -> Tensor:
        return self.apply("sum", [a], axis=axis)

    def mean(self, a: Tensor, axis: Optional[int] = None) -> Tensor:
        return self.apply("mean", [a], axis=axis)

    def take(self, a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
        return self.apply("take", [a], indices=np.asarray(indices, dtype=np.int64), axis=axis)

    def slice(self, a: Tensor, axis: int, start: int, stop: int) -> Tensor:
        return self.apply("slice", [a], axis=axis, start=start, stop=stop)

    def concat(self, parts: Sequence[Tensor], axis: int = 0) -> Tensor:
        return self.apply("concat", list(parts), axis=axis)

    def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        return self.apply("reshape", [a], shape=tuple(shape))

    def transpose(self, a: Tensor, axes: Sequence[int]) -> Tensor:
        return self.apply("transpose", [a], axes=tuple(axes))

    def cumsum(self, a: Tensor, axis: int = 0) -> Tensor:
        return self.apply("cumsum", [a], axis=axis)

    def segsum(self, a: Tensor) -> Tensor:
        return self.apply("segsum", [a])

    def causal_conv1d(self, x: Tensor, w: Tensor, prefix: Optional[np.ndarray] = None) -> Tensor:
        return self.apply("causal_conv1d", [x, w], prefix=prefix)

    def rope(self, x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
        return self.apply("rope", [x], positions=np.asarray(positions, dtype=np.float64), base=float(base))

    def ssd_scan(self, x: Tensor, dt: Tensor, a: Tensor, b: Tensor, c: Tensor, h0: Tensor) -> Tuple[Tensor, Tensor]:
        return self.apply("ssd_scan", [x, dt, a, b, c, h0])

    def grad(self, t: Tensor) -> np.ndarray:
        return self.gradients[t.id]


def forward_primitive(tape: GradTape, kind: str, inputs: Sequence[Tensor], **attrs: Any):
    """
    Apply primitive `kind` on `tape`.

    Args:
        tape: Tape that records the application
        kind: Registered primitive name
        inputs: Input tensors (must conform to the primitive's shape rule)
        **attrs: Non-differentiable parameters (axes, masks, targets, ...)

    Returns:
        The output Tensor (a tuple for multi-output primitives)

    Raises:
        ShapeError: If input shapes do not conform
        NonFiniteError: If any output value is NaN or Inf
    """
    return tape.apply(kind, inputs, **attrs)


def backward(tape: GradTape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss.

    Every leaf registered with requires_grad gets a gradient; leaves the loss
    does not depend on get zeros.

    Args:
        tape: The recording tape that produced loss
        loss: Scalar tensor

    Returns:
        Mapping leaf id -> gradient array (same shape as the leaf)

    Raises:
        ShapeError: If loss is not a scalar
        ValueError: If the tape does not record or loss was not produced on it
    """
    if not tape.record:
        raise ValueError("backward() needs a recording tape")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    produced = {oid for node in tape.nodes for oid in node.output_ids}
    if loss.id not in produced and loss.id not in tape._leaves:
        raise ValueError("loss was not produced on this tape")

    for node in reversed(tape.nodes):
        # append-only tape: inputs always precede outputs
        assert all(i < min(node.output_ids) for i in node.input_ids), "tape order violated"
        out_grads = [grads.pop(oid, None) for oid in node.output_ids]
        if all(g is None for g in out_grads):
            continue
        out_grads = [
            np.zeros(shape, dtype=node.inputs[0].dtype) if g is None else g
            for g, shape in zip(out_grads, node.output_shapes)
        ]
        prim = PRIMITIVES[node.kind]
        in_grads = prim.backward(out_grads, node.inputs, node.saved, **node.attrs)
        for input_id, g in zip(node.input_ids, in_grads):
            if g is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + g
            else:
                grads[input_id] = g

    tape.gradients = {}
    for leaf_id, leaf in tape._leaves.items():
        g = grads.get(leaf_id)
        if g is None:
            g = np.zeros_like(leaf.data)
        if g.shape != leaf.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match leaf {leaf.shape}")
        tape.gradients[leaf_id] = g.astype(leaf.data.dtype, copy=False)
    return tape.gradients


# ===============================================
# BROADCASTING HELPERS
# ===============================================

def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], kind: str) -> Tuple[int, ...]:
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a} and {b} do not broadcast", a=a, b=b)
    if out != a and out != b:
        raise ShapeError(f"{kind}: only one operand may broadcast ({a} vs {b})", a=a, b=b)
    return out


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return shifted / np.sum(shifted, axis=axis, keepdims=True)


def _index(ndim: int, axis: int, item: Any) -> Tuple[Any, ...]:
    axis = axis % ndim
    return (slice(None),) * axis + (item,)


# ===============================================
# ELEMENTWISE PRIMITIVES
# ===============================================

def _add_fwd(inputs, **_):
    a, b = inputs
    _broadcast_shape(a.shape, b.shape, "add")
    return a + b, None


def _add_bwd(grads, inputs, saved, **_):
    g = grads[0]
    return [_reduce_to(g, inputs[0].shape), _reduce_to(g, inputs[1].shape)]


def _sub_fwd(inputs, **_):
    a, b = inputs
    _broadcast_shape(a.shape, b.shape, "sub")
    return a - b, None


def _sub_bwd(grads, inputs, saved, **_):
    g = grads[0]
    return [_reduce_to(g, inputs[0].shape), _reduce_to(-g, inputs[1].shape)]


def _mul_fwd(inputs, **_):
    a, b = inputs
    _broadcast_shape(a.shape, b.shape, "mul")
    return a * b, None


def _mul_bwd(grads, inputs, saved, **_):
    g = grads[0]
    a, b = inputs
    return [_reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)]


def _scale_fwd(inputs, factor):
    return inputs[0] * inputs[0].dtype.type(factor), None


def _scale_bwd(grads, inputs, saved, factor):
    return [grads[0] * grads[0].dtype.type(factor)]


def _exp_fwd(inputs, **_):
    y = np.exp(inputs[0])
    return y, y


def _exp_bwd(grads, inputs, saved, **_):
    return [grads[0] * saved]


def _softplus_fwd(inputs, **_):
    return np.logaddexp(inputs[0].dtype.type(0), inputs[0]), None


def _softplus_bwd(grads, inputs, saved, **_):
    return [grads[0] * expit(inputs[0])]


def _silu_fwd(inputs, **_):
    s = expit(inputs[0])
    return inputs[0] * s, s


def _silu_bwd(grads, inputs, saved, **_):
    x, s = inputs[0], saved
    return [grads[0] * s * (1 + x * (1 - s))]


def _squared_relu_fwd(inputs, **_):
    r = np.maximum(inputs[0], 0)
    return r * r, r


def _squared_relu_bwd(grads, inputs, saved, **_):
    return [grads[0] * 2 * saved]


register_primitive("add", _add_fwd, _add_bwd)
register_primitive("sub", _sub_fwd, _sub_bwd)
register_primitive("mul", _mul_fwd, _mul_bwd)
register_primitive("scale", _scale_fwd, _scale_bwd)
register_primitive("exp", _exp_fwd, _exp_bwd)
register_primitive("softplus", _softplus_fwd, _softplus_bwd)
register_primitive("silu", _silu_fwd, _silu_bwd)
register_primitive("squared_relu", _squared_relu_fwd, _squared_relu_bwd)


# ===============================================
# CONTRACTIONS
# ===============================================

def _matmul_fwd(inputs, **_):
    a, b = inputs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}", a=a.shape, b=b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} x {b.shape}", a=a.shape, b=b.shape)
    return a @ b, None


def _matmul_bwd(grads, inputs, saved, **_):
    g = grads[0]
    a, b = inputs
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return [ga, gb]


def _einsum_fwd(inputs, subscripts):
    lhs, _, out = subscripts.partition("->")
    subs = lhs.split(",")
    if "->" not in subscripts or len(subs) != len(inputs) or "." in subscripts:
        raise ValueError(f"einsum needs explicit output and no ellipsis: {subscripts!r}")
    for sub, arr in zip(subs, inputs):
        if len(sub) != arr.ndim or len(set(sub)) != len(sub):
            raise ShapeError(f"einsum operand {sub!r} does not fit shape {arr.shape}")
    try:
        return np.einsum(subscripts, *inputs, optimize=True), None
    except ValueError as e:
        raise ShapeError(f"einsum {subscripts!r}: {e}")


def _einsum_bwd(grads, inputs, saved, subscripts):
    lhs, _, out = subscripts.partition("->")
    subs = lhs.split(",")
    g = grads[0]
    result = []
    for i, (sub, arr) in enumerate(zip(subs, inputs)):
        others = [s for j, s in enumerate(subs) if j != i]
        other_arrays = [a for j, a in enumerate(inputs) if j != i]
        present = set("".join(others)) | set(out)
        kept = "".join(ch for ch in sub if ch in present)
        spec = ",".join(others + [out]) + "->" + kept
        partial = np.einsum(spec, *other_arrays, g, optimize=True)
        if kept != sub:
            # letters summed only inside this operand: gradient is constant along them
            shape = [arr.shape[k] if ch in present else 1 for k, ch in enumerate(sub)]
            partial = np.broadcast_to(partial.reshape(shape), arr.shape).copy()
        result.append(partial)
    return result


def _linear_fwd(inputs, precision):
    x, w = inputs
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}", x=x.shape, w=w.shape)
    x2 = x.reshape(-1, x.shape[-1])
    if precision == Precision.FP8:
        xq = quantize(x2, ACTIVATION_FORMAT)
        wq = quantize(w, WEIGHT_FORMAT)
        y2 = qgemm(xq, wq.T).astype(x.dtype)
        saved = (dequantize(xq).astype(x.dtype), dequantize(wq).astype(x.dtype))
    else:
        y2 = x2 @ w.T
        saved = (x2, w)
    return y2.reshape(x.shape[:-1] + (w.shape[0],)), saved


def _linear_bwd(grads, inputs, saved, precision):
    x, w = inputs
    x2, w_used = saved
    g = grads[0].reshape(-1, w.shape[0])
    if precision == Precision.FP8:
        g = fake_quantize(g, GRADIENT_FORMAT).astype(x.dtype, copy=False)
    gx = (g @ w_used).reshape(x.shape)
    gw = g.T @ x2
    return [gx, gw]


register_primitive("matmul", _matmul_fwd, _matmul_bwd)
register_primitive("einsum", _einsum_fwd, _einsum_bwd)
register_primitive("linear", _linear_fwd, _linear_bwd)


# ===============================================
# NORMALIZATION, SOFTMAX AND LOSSES
# ===============================================

def _rmsnorm_fwd(inputs, eps):
    x, gain = inputs
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm gain {gain.shape} vs input {x.shape}")
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
    n = x * r
    return n * gain, (n, r)


def _rmsnorm_bwd(grads, inputs, saved, eps):
    g = grads[0]
    x, gain = inputs
    n, r = saved
    gy = g * gain
    gx = r * (gy - n * np.mean(gy * n, axis=-1, keepdims=True))
    ggain = (g * n).reshape(-1, gain.shape[0]).sum(axis=0)
    return [gx, ggain]


def _softmax_fwd(inputs, mask=None):
    x = inputs[0]
    if mask is None:
        y = _softmax(x)
    else:
        visible = np.broadcast_to(mask, x.shape)
        if not np.all(np.any(visible, axis=-1)):
            raise ValueError("softmax mask hides every position of a row")
        z = np.where(visible, x, -np.inf)
        e = np.where(visible, np.exp(z - np.max(z, axis=-1, keepdims=True)), 0)
        y = e / np.sum(e, axis=-1, keepdims=True)
    return y.astype(x.dtype, copy=False), y


def _softmax_bwd(grads, inputs, saved, mask=None):
    g, y = grads[0], saved
    return [y * (g - np.sum(g * y, axis=-1, keepdims=True))]


def _log_softmax_fwd(inputs, **_):
    y = _log_softmax(inputs[0])
    return y, y


def _log_softmax_bwd(grads, inputs, saved, **_):
    g = grads[0]
    return [g - np.exp(saved) * np.sum(g, axis=-1, keepdims=True)]


def _cross_entropy_fwd(inputs, targets):
    logits = inputs[0]
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise ValueError("cross_entropy target outside vocabulary")
    logp = _log_softmax(logits)
    loss = -np.mean(logp[np.arange(len(targets)), targets])
    return np.asarray(loss, dtype=logits.dtype), logp


def _cross_entropy_bwd(grads, inputs, saved, targets):
    g = grads[0]
    p = np.exp(saved)
    p[np.arange(len(targets)), targets] -= 1
    return [p * (g / len(targets))]


def _forward_kl_fwd(inputs, teacher_logits, temperature):
    student = inputs[0]
    if student.shape != teacher_logits.shape or student.ndim != 2:
        raise ShapeError(f"forward_kl: student {student.shape} vs teacher {teacher_logits.shape}")
    log_p = _log_softmax(teacher_logits / temperature)
    log_q = _log_softmax(student.astype(np.float64) / temperature)
    p = np.exp(log_p)
    per_position = np.sum(p * (log_p - log_q), axis=-1)
    loss = temperature * temperature * np.mean(per_position)
    return np.asarray(loss, dtype=student.dtype), (p, np.exp(log_q))


def _forward_kl_bwd(grads, inputs, saved, teacher_logits, temperature):
    p, q = saved
    n = p.shape[0]
    return [(grads[0] * temperature * (q - p) / n).astype(inputs[0].dtype)]


def _sum_fwd(inputs, axis=None):
    return np.asarray(np.sum(inputs[0], axis=axis), dtype=inputs[0].dtype), None


def _sum_bwd(grads, inputs, saved, axis=None):
    g = grads[0]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, inputs[0].shape).copy()]


def _mean_fwd(inputs, axis=None):
    return np.asarray(np.mean(inputs[0], axis=axis), dtype=inputs[0].dtype), None


def _mean_bwd(grads, inputs, saved, axis=None):
    x = inputs[0]
    count = x.size if axis is None else x.shape[axis]
    g = grads[0] / count
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


register_primitive("rmsnorm", _rmsnorm_fwd, _rmsnorm_bwd)
register_primitive("softmax", _softmax_fwd, _softmax_bwd)
register_primitive("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
register_primitive("cross_entropy", _cross_entropy_fwd, _cross_entropy_bwd)
register_primitive("forward_kl", _forward_kl_fwd, _forward_kl_bwd)
register_primitive("sum", _sum_fwd, _sum_bwd)
register_primitive("mean", _mean_fwd, _mean_bwd)


# ===============================================
# INDEXING AND LAYOUT
# ===============================================

def _take_fwd(inputs, indices, axis=0):
    x = inputs[0]
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise ShapeError(f"take: index out of range for axis of size {x.shape[axis]}")
    return np.take(x, indices, axis=axis), None


def _take_bwd(grads, inputs, saved, indices, axis=0):
    gx = np.zeros_like(inputs[0])
    np.add.at(gx, _index(gx.ndim, axis, indices), grads[0])
    return [gx]


def _slice_fwd(inputs, axis, start, stop):
    x = inputs[0]
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] outside axis of size {x.shape[axis]}")
    return x[_index(x.ndim, axis, slice(start, stop))], None


def _slice_bwd(grads, inputs, saved, axis, start, stop):
    gx = np.zeros_like(inputs[0])
    gx[_index(gx.ndim, axis, slice(start, stop))] = grads[0]
    return [gx]


def _concat_fwd(inputs, axis=0):
    try:
        return np.concatenate(inputs, axis=axis), None
    except ValueError as e:
        raise ShapeError(f"concat: {e}")


def _concat_bwd(grads, inputs, saved, axis=0):
    bounds = np.cumsum([x.shape[axis] for x in inputs])[:-1]
    return list(np.split(grads[0], bounds, axis=axis))


def _reshape_fwd(inputs, shape):
    x = inputs[0]
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape}")
    return x.reshape(shape), None


def _reshape_bwd(grads, inputs, saved, shape):
    return [grads[0].reshape(inputs[0].shape)]


def _transpose_fwd(inputs, axes):
    return np.transpose(inputs[0], axes), None


def _transpose_bwd(grads, inputs, saved, axes):
    return [np.transpose(grads[0], np.argsort(axes))]


def _cumsum_fwd(inputs, axis=0):
    return np.cumsum(inputs[0], axis=axis), None


def _reverse_cumsum(g: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)


def _cumsum_bwd(grads, inputs, saved, axis=0):
    return [_reverse_cumsum(grads[0], axis)]


def _segsum_fwd(inputs, **_):
    x = inputs[0]
    t = x.shape[-1]
    cum = np.cumsum(x, axis=-1)
    lower = np.tril(np.ones((t, t), dtype=bool))
    diff = cum[..., :, None] - cum[..., None, :]
    return np.where(lower, diff, 0).astype(x.dtype), lower


def _segsum_bwd(grads, inputs, saved, **_):
    gm = np.where(saved, grads[0], 0)
    gcum = gm.sum(axis=-1) - gm.sum(axis=-2)
    return [_reverse_cumsum(gcum, -1).astype(inputs[0].dtype)]


register_primitive("take", _take_fwd, _take_bwd)
register_primitive("slice", _slice_fwd, _slice_bwd)
register_primitive("concat", _concat_fwd, _concat_bwd)
register_primitive("reshape", _reshape_fwd, _reshape_bwd)
register_primitive("transpose", _transpose_fwd, _transpose_bwd)
register_primitive("cumsum", _cumsum_fwd, _cumsum_bwd)
register_primitive("segsum", _segsum_fwd, _segsum_bwd)


# ===============================================
# SEQUENCE PRIMITIVES (conv, rotary, selective scan)
# ===============================================

def _causal_conv1d_fwd(inputs, prefix=None):
    x, w = inputs
    length, channels = x.shape
    if w.ndim != 2 or w.shape[0] != channels:
        raise ShapeError(f"causal_conv1d: input {x.shape} vs weight {w.shape}")
    k = w.shape[1]
    if prefix is None:
        prefix = np.zeros((k - 1, channels), dtype=x.dtype)
    if prefix.shape != (k - 1, channels):
        raise ShapeError(f"causal_conv1d: prefix {prefix.shape}, expected {(k - 1, channels)}")
    xp = np.concatenate([prefix.astype(x.dtype), x], axis=0)
    y = np.zeros_like(x)
    for j in range(k):
        y += xp[j:j + length] * w[:, j]
    return y, xp


def _causal_conv1d_bwd(grads, inputs, saved, prefix=None):
    g = grads[0]
    x, w = inputs
    xp = saved
    length, k = x.shape[0], w.shape[1]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for j in range(k):
        gxp[j:j + length] += g * w[:, j]
        gw[:, j] = np.sum(g * xp[j:j + length], axis=0)
    return [gxp[k - 1:], gw]


def _rope_angles(positions: np.ndarray, head_dim: int, base: float) -> Tuple[np.ndarray, np.ndarray]:
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _rope_fwd(inputs, positions, base):
    x = inputs[0]
    hd = x.shape[-1]
    if hd % 2 or x.shape[-2] != len(positions):
        raise ShapeError(f"rope: input {x.shape} vs {len(positions)} positions")
    cos, sin = (a.astype(x.dtype) for a in _rope_angles(positions, hd, base))
    x1, x2 = x[..., : hd // 2], x[..., hd // 2:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1), (cos, sin)


def _rope_bwd(grads, inputs, saved, positions, base):
    cos, sin = saved
    g = grads[0]
    hd = g.shape[-1]
    g1, g2 = g[..., : hd // 2], g[..., hd // 2:]
    return [np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1)]


def ssd_step(h: np.ndarray, x_t: np.ndarray, dt_t: np.ndarray, a_t: np.ndarray,
             b_t: np.ndarray, c_t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    One step of the selective-state recurrence (per head, B/C already per head).

        h_t = a_t * h_{t-1} + dt_t * (x_t outer B_t)
        y_t = h_t . C_t

    Args:
        h: (heads, head_dim, d_state) previous state
        x_t: (heads, head_dim)
        dt_t: (heads,) step sizes
        a_t: (heads,) decays exp(dt_t * A)
        b_t, c_t: (heads, d_state)

    Returns:
        (y_t of shape (heads, head_dim), new state)
    """
    h_new = a_t[:, None, None] * h + (dt_t[:, None] * x_t)[:, :, None] * b_t[:, None, :]
    y_t = np.einsum("hpn,hn->hp", h_new, c_t)
    return y_t, h_new


def _heads_per_group(x: np.ndarray, b: np.ndarray) -> int:
    heads, groups = x.shape[1], b.shape[1]
    if groups == 0 or heads % groups:
        raise ShapeError(f"{heads} heads cannot share {groups} B/C groups")
    return heads // groups


def _ssd_scan_fwd(inputs, **_):
    x, dt, a_neg, b, c, h0 = inputs
    length, heads, head_dim = x.shape
    d_state = b.shape[-1]
    if (dt.shape != (length, heads) or a_neg.shape != (heads,) or b.shape != c.shape
            or b.shape[0] != length or h0.shape != (heads, head_dim, d_state)):
        raise ShapeError("ssd_scan: inconsistent shapes",
                         x=x.shape, dt=dt.shape, A=a_neg.shape, B=b.shape, C=c.shape, h0=h0.shape)
    hpg = _heads_per_group(x, b)
    bh = np.repeat(b, hpg, axis=1)
    ch = np.repeat(c, hpg, axis=1)
    decay = np.exp(dt * a_neg)
    states = np.empty((length + 1, heads, head_dim, d_state), dtype=x.dtype)
    states[0] = h0
    y = np.empty_like(x)
    for t in range(length):
        y[t], states[t + 1] = ssd_step(states[t], x[t], dt[t], decay[t], bh[t], ch[t])
    return (y, states[length].copy()), (states, decay, bh, ch, hpg)


def _ssd_scan_bwd(grads, inputs, saved, **_):
    gy, g_final = grads
    x, dt, a_neg, b, c, h0 = inputs
    states, decay, bh, ch, hpg = saved
    length, heads, head_dim = x.shape
    d_state = b.shape[-1]

    lam = g_final.copy()
    gx = np.zeros_like(x)
    gdt = np.zeros_like(dt)
    ga_neg = np.zeros_like(a_neg)
    gbh = np.zeros_like(bh)
    gch = np.zeros_like(ch)
    for t in reversed(range(length)):
        lam = lam + gy[t][:, :, None] * ch[t][:, None, :]
        gch[t] = np.einsum("hpn,hp->hn", states[t + 1], gy[t])
        u = np.einsum("hpn,hn->hp", lam, bh[t])
        gx[t] = dt[t][:, None] * u
        gbh[t] = dt[t][:, None] * np.einsum("hpn,hp->hn", lam, x[t])
        g_decay = np.einsum("hpn,hpn->h", lam, states[t])
        gdt[t] = g_decay * decay[t] * a_neg + np.einsum("hp,hp->h", u, x[t])
        ga_neg += g_decay * decay[t] * dt[t]
        lam = decay[t][:, None, None] * lam

    groups = b.shape[1]
    gb = gbh.reshape(length, groups, hpg, d_state).sum(axis=2)
    gc = gch.reshape(length, groups, hpg, d_state).sum(axis=2)
    return [gx, gdt, ga_neg, gb, gc, lam]


register_primitive("causal_conv1d", _causal_conv1d_fwd, _causal_conv1d_bwd)
register_primitive("rope", _rope_fwd, _rope_bwd)
register_primitive("ssd_scan", _ssd_scan_fwd, _ssd_scan_bwd, n_outputs=2)


def ssd_chunked(tape: GradTape, x: Tensor, dt: Tensor, a_neg: Tensor, b: Tensor, c: Tensor,
                h0: Tensor, chunk: int) -> Tuple[Tensor, Tensor]:
    """
    Chunked selective scan built from tape primitives.

    Within a chunk the output is a masked quadratic form (decay matrix from
    segmented sums); across chunks the state is carried by the linear
    recurrence. Equal to the sequential ssd_scan up to float rounding for
    any chunk size, including sizes that do not divide the sequence.

    Args:
        tape: Tape to record on
        x: (seq, heads, head_dim)
        dt: (seq, heads) positive step sizes
        a_neg: (heads,) negative decay rates (-exp(A_log))
        b, c: (seq, groups, d_state)
        h0: (heads, head_dim, d_state) initial state
        chunk: Chunk length >= 1

    Returns:
        (y of shape (seq, heads, head_dim), final state)
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    length, heads, _ = x.shape
    hpg = _heads_per_group(x.data, b.data)
    head_group = np.arange(heads) // hpg
    bh = tape.take(b, head_group, axis=1)
    ch = tape.take(c, head_group, axis=1)
    xdt = tape.mul(x, tape.reshape(dt, (length, heads, 1)))
    log_decay = tape.mul(dt, a_neg)

    state = h0
    outputs = []
    for start in range(0, length, chunk):
        stop = min(start + chunk, length)
        size = stop - start
        ld = tape.slice(log_decay, 0, start, stop)
        xc = tape.slice(xdt, 0, start, stop)
        bc = tape.slice(bh, 0, start, stop)
        cc = tape.slice(ch, 0, start, stop)

        cum = tape.cumsum(ld, axis=0)
        seg = tape.segsum(tape.transpose(ld, (1, 0)))
        lower = tape.constant(np.tril(np.ones((size, size))))
        decay = tape.mul(tape.exp(seg), lower)

        y_diag = tape.einsum("lhn,shn,hls,shp->lhp", cc, bc, decay, xc)
        y_off = tape.einsum("lhn,hpn,lh->lhp", cc, state, tape.exp(cum))
        outputs.append(tape.add(y_diag, y_off))

        cum_last = tape.slice(cum, 0, size - 1, size)
        to_end = tape.exp(tape.sub(cum_last, cum))
        chunk_state = tape.einsum("shn,sh,shp->hpn", bc, to_end, xc)
        carry = tape.reshape(tape.exp(cum_last), (heads, 1, 1))
        state = tape.add(tape.mul(state, carry), chunk_state)

    y = outputs[0] if len(outputs) == 1 else tape.concat(outputs, axis=0)
    return y, state


# ===============================================
# GRADIENT ORACLE
# ===============================================

def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               h: float = 1e-4, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Central-difference gradient of a scalar function, in float64.

    Args:
        f: Deterministic scalar function of an array shaped like x
        x: Point to differentiate at
        h: Step size (> 0)
        indices: Optional flat coordinates to perturb; others are left at 0

    Returns:
        Array shaped like x with (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate

    Raises:
        ValueError: If h <= 0
        NonFiniteError: If any evaluation of f is not finite
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = np.array(x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        saved = flat[i]
        flat[i] = saved + h
        f_plus = float(f(base))
        flat[i] = saved - h
        f_minus = float(f(base))
        flat[i] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError("finite-difference evaluation is not finite", coordinate=int(i))
        out[i] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / denom
