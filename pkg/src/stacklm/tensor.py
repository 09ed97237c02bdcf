"""Dense tensors with reverse-mode differentiation on an explicit tape.

The design goal is an auditable core rather than a general array library:
tensors are plain row-major numpy arrays, every differentiable primitive is a
free function, and the tape records primitives in execution order so the
backward pass can walk them in exact reverse order.  Broadcasting is limited
to the patterns a transformer needs (trailing-dimension bias adds and
constant mask adds).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

# Additive mask value for attention logits.  Large enough that exp() of a
# masked score underflows to exactly 0.0 in both float32 and float64.
MASK_VALUE = -1e9

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense array plus its gradient slot.

    ``data`` is always a numpy float array; ``grad`` is filled in (same
    shape) by ``Tape.backward`` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same storage, cut off from any recorded history."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Nodes are appended in execution order; ``backward`` visits them in exact
    reverse order, which is a reverse topological order of the recorded
    graph.  A tape can be consumed by ``backward`` only once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def record(self, inputs, output: Tensor, backward_fn) -> None:
        self._nodes.append(_Node(tuple(inputs), output, backward_fn))

    def backward(self, root: Tensor, seed_grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from ``root`` back through every recorded node.

        ``seed_grad`` defaults to ones (the usual scalar-loss case).  Raises
        if the tape was already consumed; re-record the forward pass instead.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); re-record the forward pass")
        self._consumed = True
        if seed_grad is None:
            seed_grad = np.ones_like(root.data)
        _accumulate(root, np.asarray(seed_grad, dtype=root.dtype))
        for node in reversed(self._nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            grads = node.backward_fn(upstream)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                _accumulate(tensor, grad)


_ACTIVE_TAPE: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


@contextlib.contextmanager
def no_recording():
    """Run forward code without recording onto any tape."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = prev


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if grad.shape != tensor.data.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {tensor.data.shape}")
    if tensor.grad is None:
        tensor.grad = grad.astype(tensor.dtype, copy=True)
    else:
        tensor.grad += grad


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape`` (trailing-aligned)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise / structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a same-shape tensor, a trailing-aligned
    bias, or a constant array broadcastable against ``a`` (mask add)."""
    b = _as_tensor(b)
    out = a.data + b.data
    if out.shape != a.data.shape:
        raise ShapeError(f"add result shape {out.shape} must match left operand {a.data.shape}")

    def backward(g):
        return g, _sum_to_shape(g, b.data.shape)

    return _record((a, b), out, backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with the same broadcasting contract as ``add``."""
    b = _as_tensor(b)
    out = a.data * b.data
    if out.shape != a.data.shape:
        raise ShapeError(f"mul result shape {out.shape} must match left operand {a.data.shape}")

    def backward(g):
        return _sum_to_shape(g * b.data, a.data.shape), _sum_to_shape(g * a.data, b.data.shape)

    return _record((a, b), out, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _record((a,), a.data * np.asarray(c, dtype=a.dtype), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: 2-D x 2-D, N-D x 2-D (applying a weight matrix to a
    batch), and N-D x N-D with identical leading batch dimensions
    (attention).  Backward accumulates dA = dC @ B^T and dB = A^T @ dC.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {ad.shape} x {bd.shape}")
    out = ad @ bd

    def backward(g):
        da = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            db = np.swapaxes(ad, -1, -2) @ g
        return da, db

    return _record((a, b), out, backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record((a,), np.transpose(a.data, axes), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _record((a,), a.data.reshape(shape), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (used to split fused projections)."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record((a,), a.data[index].copy(), backward)


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """Pick one position along ``axis`` (removing the axis)."""
    taken = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record((a,), taken.copy(), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.full_like(a.data, g),)

    return _record((a,), np.asarray(a.data.sum(), dtype=a.dtype), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _record((a,), out, backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record((a,), out, backward)


def softmax(a: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax over the last axis, with an optional constant additive
    mask (e.g. causal or padding mask built from ``MASK_VALUE``)."""
    x = a.data
    if additive_mask is not None:
        x = x + additive_mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record((a,), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm needs a non-empty last dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx, dgain, dbias

    return _record((x, gain, bias), out, backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; the backward pass is a scatter-add into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]}) in embedding lookup")
    out = table.data[ids]

    def backward(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (dtable,)

    return _record((table,), out, backward)


def dropout(x: Tensor, p: float, rng: Optional["DropoutRng"], layer: int, slot: int) -> Tensor:
    """Inverted dropout.

    ``rng`` carries the counter-based stream; passing ``None`` (evaluation
    mode) or ``p == 0`` makes this the identity.  The keep mask is a pure
    function of (seed, step, example id, layer, slot) so recomputation and
    sharded execution reproduce it exactly.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None or p == 0.0:
        return x
    mask = rng.keep_mask(layer, slot, x.shape, p).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return _record((x,), x.data * mask, backward)


class DropoutRng:
    """Counter-based dropout stream.

    Masks are derived per example row from ``(seed, step, example_id,
    layer, slot)``, never from call timing, so a forward pass replayed for
    activation recomputation, or run shard-by-shard, draws identical masks.
    """

    _DOMAIN = 0x51AC  # keeps dropout draws disjoint from init/masking draws

    def __init__(self, seed: int, step: int, example_ids: Sequence[int]):
        self.seed = int(seed)
        self.step = int(step)
        self.example_ids = [int(e) for e in example_ids]

    def keep_mask(self, layer: int, slot: int, shape: tuple[int, ...], p: float) -> np.ndarray:
        if len(shape) < 2 or shape[0] != len(self.example_ids):
            raise ShapeError(f"dropout input leading dim {shape[:1]} must match {len(self.example_ids)} example rows")
        keep = np.empty(shape, dtype=np.float64)
        for row, ex in enumerate(self.example_ids):
            gen = np.random.default_rng((self._DOMAIN, self.seed, self.step, ex, layer, slot))
            keep[row] = gen.random(shape[1:])
        return (keep >= p) / (1.0 - p)


# ---------------------------------------------------------------------------
# Fused loss head
# ---------------------------------------------------------------------------


def softmax_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    mask: Optional[np.ndarray] = None,
    normalizer: Optional[float] = None,
) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions with nonzero mask.

    ``logits`` is (..., V); ``targets`` holds integer ids of shape
    logits.shape[:-1]; ``mask`` is a same-shape weight array (defaults to
    all ones).  Positions with zero weight contribute nothing.  An all-zero
    mask yields a zero loss with zero gradient.  ``normalizer`` overrides
    the denominator (the mask sum) so a batch shard can be normalized by
    the full-batch weight.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} must equal logits shape {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    if mask is None:
        mask = np.ones(targets.shape, dtype=logits.dtype)
    mask = np.asarray(mask, dtype=logits.dtype)

    x = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    log_probs = x - logsumexp
    flat_lp = log_probs.reshape(-1, vocab)
    flat_t = targets.reshape(-1)
    nll = -flat_lp[np.arange(flat_t.size), flat_t].reshape(targets.shape)
    total_weight = float(mask.sum()) if normalizer is None else float(normalizer)
    if total_weight == 0.0:
        loss = np.asarray(0.0, dtype=logits.dtype)

        def backward_zero(g):
            return (np.zeros_like(logits.data),)

        return _record((logits,), loss, backward_zero)
    loss = np.asarray((nll * mask).sum() / total_weight, dtype=logits.dtype)

    def backward(g):
        probs = np.exp(log_probs)
        flat_p = probs.reshape(-1, vocab).copy()
        flat_p[np.arange(flat_t.size), flat_t] -= 1.0
        weighted = flat_p * (mask.reshape(-1, 1) / total_weight)
        return (g * weighted.reshape(logits.data.shape),)

    return _record((logits,), loss, backward)


# ---------------------------------------------------------------------------
# Activation recomputation
# ---------------------------------------------------------------------------


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run ``fn`` discarding intermediate activations; recompute on backward.

    The forward pass executes ``fn`` unrecorded (values only).  The tape
    gets a single node whose backward replays ``fn`` on a private sub-tape
    and pushes the upstream gradient through it.  Parameters captured by
    ``fn`` accumulate their gradients during the replay exactly as they
    would have on the flat tape, so results are bit-identical provided
    ``fn`` draws randomness from counter-based streams only.
    """
    tape = _ACTIVE_TAPE
    if tape is None:
        return fn(*inputs)
    with no_recording():
        primary = fn(*inputs)

    def backward(g):
        proxies = [Tensor(t.data, requires_grad=t.requires_grad) for t in inputs]
        with Tape() as sub:
            replay = fn(*proxies)
        if not np.array_equal(replay.data, primary.data):
            raise RuntimeError("recomputed activations disagree with the original forward pass")
        sub.backward(replay, seed_grad=g)
        return tuple(p.grad for p in proxies)

    # Recorded unconditionally: fn usually closes over parameters that
    # require gradients even when the explicit inputs do not.
    out = Tensor(primary.data, requires_grad=True)
    tape.record(tuple(inputs), out, backward)
    return out
