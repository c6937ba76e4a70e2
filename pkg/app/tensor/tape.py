"""
Explicit operation tape for reverse-mode differentiation
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ShapeError, UsageError
from app.tensor import kernels

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Value:
    """A float64 array living on a tape, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: Optional[str] = None):
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar value, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Value{label} shape={self.data.shape} requires_grad={self.requires_grad}>"


@dataclass
class TapeEntry:
    """One recorded op application."""

    op: str
    inputs: Tuple[Value, ...]
    output: Value
    saved: Dict[str, Any] = field(default_factory=dict)
    vjp: Optional[VJP] = None


class Gradients:
    """Gradients produced by one backward pass, looked up by Value."""

    def __init__(self, grads: Dict[int, np.ndarray], values: Dict[int, Value]):
        self._grads = grads
        self._values = values

    def __contains__(self, value: Value) -> bool:
        return id(value) in self._grads

    def __getitem__(self, value: Value) -> np.ndarray:
        """Gradient of the loss w.r.t. ``value``; zeros when nothing flowed into it."""
        grad = self._grads.get(id(value))
        if grad is None:
            return np.zeros_like(value.data)
        return grad

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """
    Ordered record of op applications.

    Every op method computes its forward result with ``app.tensor.kernels``,
    appends a ``TapeEntry`` holding the inputs and saved intermediates, and
    returns the output ``Value``. A tape belongs to one forward pass.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    # -- leaves -----------------------------------------------------------

    def leaf(self, array, name: Optional[str] = None, requires_grad: bool = True) -> Value:
        """Wrap an input or parameter array; gradients are collected for it."""
        return Value(np.array(array, dtype=kernels.DTYPE), requires_grad=requires_grad, name=name)

    def constant(self, array, name: Optional[str] = None) -> Value:
        return self.leaf(array, name=name, requires_grad=False)

    def _record(
        self,
        op: str,
        inputs: Sequence[Value],
        out: np.ndarray,
        vjp: VJP,
        saved: Optional[Dict[str, Any]] = None,
    ) -> Value:
        output = Value(out, requires_grad=any(v.requires_grad for v in inputs), name=op)
        self.entries.append(
            TapeEntry(op=op, inputs=tuple(inputs), output=output, saved=saved or {}, vjp=vjp)
        )
        return output

    # -- ops ----------------------------------------------------------------

    def conv2d(
        self,
        x: Value,
        kernel: Value,
        bias: Value,
        stride: int = 1,
        dilation: int = 1,
        padding: int = 0,
    ) -> Value:
        out, saved = kernels.conv2d_forward(x.data, kernel.data, bias.data, stride, dilation, padding)

        def vjp(g):
            return kernels.conv2d_backward(g, kernel.data, saved, stride, dilation, padding)

        return self._record("conv2d", (x, kernel, bias), out, vjp, saved)

    def relu(self, x: Value) -> Value:
        out = kernels.relu_forward(x.data)
        return self._record("relu", (x,), out, lambda g: (kernels.relu_backward(g, x.data),))

    def tanh_act(self, x: Value) -> Value:
        out = kernels.tanh_forward(x.data)
        return self._record("tanh_act", (x,), out, lambda g: (kernels.tanh_backward(g, out),))

    def spatial_softmax(self, m: Value) -> Value:
        out = kernels.spatial_softmax_forward(m.data)
        return self._record(
            "spatial_softmax", (m,), out, lambda g: (kernels.spatial_softmax_backward(g, out),)
        )

    def channel_sum(self, x: Value) -> Value:
        out = kernels.channel_sum_forward(x.data)
        channels = x.shape[1]
        return self._record(
            "channel_sum", (x,), out, lambda g: (kernels.channel_sum_backward(g, channels),)
        )

    def global_avg_pool(self, x: Value) -> Value:
        out = kernels.global_avg_pool_forward(x.data)
        shape = x.shape
        return self._record(
            "global_avg_pool", (x,), out, lambda g: (kernels.global_avg_pool_backward(g, shape),)
        )

    def linear(self, x: Value, weight: Value, bias: Value) -> Value:
        out = kernels.linear_forward(x.data, weight.data, bias.data)
        return self._record(
            "linear",
            (x, weight, bias),
            out,
            lambda g: kernels.linear_backward(g, x.data, weight.data),
        )

    def concat(self, parts: Sequence[Value]) -> Value:
        """Join (n, d_i) matrices along the feature axis."""
        out = kernels.concat_forward([p.data for p in parts])
        widths = [p.shape[1] for p in parts]
        return self._record("concat", tuple(parts), out, lambda g: kernels.concat_backward(g, widths))

    def channel_correspondence(self, x: Value, s: Value) -> Value:
        out = kernels.correspondence_forward(x.data, s.data)
        return self._record(
            "channel_correspondence",
            (x, s),
            out,
            lambda g: kernels.correspondence_backward(g, x.data, s.data),
        )

    def gated_channel_mean(self, x: Value, gates: Value) -> Value:
        out = kernels.gated_mean_forward(x.data, gates.data)
        return self._record(
            "gated_channel_mean",
            (x, gates),
            out,
            lambda g: kernels.gated_mean_backward(g, x.data, gates.data),
        )

    def crop_resize(self, image: Value, box: Tuple[int, int, int, int], out: int) -> Value:
        patch, saved = kernels.crop_resize_forward(image.data, box, out)
        shape = image.shape
        return self._record(
            "crop_resize",
            (image,),
            patch,
            lambda g: (kernels.crop_resize_backward(g, shape, box, saved),),
            saved,
        )

    def cross_entropy(self, logits: Value, label: int) -> Value:
        out = kernels.cross_entropy_forward(logits.data, label)
        return self._record(
            "cross_entropy",
            (logits,),
            out,
            lambda g: (kernels.cross_entropy_backward(g, logits.data, label),),
        )

    def weighted_sum(self, values: Sequence[Value], weights: Sequence[float]) -> Value:
        """sum_i w_i * v_i over same-shaped values."""
        if len(values) != len(weights) or not values:
            raise UsageError("weighted_sum needs one weight per value")
        shapes = {v.shape for v in values}
        if len(shapes) != 1:
            raise ShapeError(f"weighted_sum operands disagree in shape: {sorted(shapes)}")
        out = sum(float(w) * v.data for w, v in zip(weights, values))
        return self._record(
            "weighted_sum",
            tuple(values),
            np.asarray(out, dtype=kernels.DTYPE),
            lambda g: tuple(float(w) * g for w in weights),
        )

    def sum_all(self, x: Value) -> Value:
        out = np.array(x.data.sum())
        shape = x.shape
        return self._record(
            "sum_all", (x,), out, lambda g: (np.full(shape, float(g), dtype=kernels.DTYPE),)
        )

    def dot_const(self, x: Value, weights: np.ndarray) -> Value:
        """Scalar sum(x * weights) with constant weights; used to scalarize outputs."""
        if weights.shape != x.shape:
            raise ShapeError(f"weight axes mismatch: {weights.shape} vs {x.shape}")
        out = np.array((x.data * weights).sum())
        return self._record("dot_const", (x,), out, lambda g: (float(g) * weights,))


def backward(tape: Tape, loss: Value, seed: float = 1.0) -> Gradients:
    """
    Replay the tape in reverse and accumulate exact gradients of ``loss``.

    Args:
        tape: The tape the loss was recorded on
        loss: A scalar Value produced by one of the tape's ops
        seed: Upstream gradient of the loss itself

    Returns:
        Gradients for every tracked Value that the loss depends on
    """
    if not tape.entries:
        raise UsageError("backward called before any forward operation was recorded")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not any(entry.output is loss for entry in tape.entries):
        raise UsageError("loss was not recorded on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.full(loss.data.shape, seed, dtype=kernels.DTYPE)}
    values: Dict[int, Value] = {id(loss): loss}

    for entry in reversed(tape.entries):
        upstream = grads.get(id(entry.output))
        if upstream is None or not entry.output.requires_grad:
            continue
        for value, grad in zip(entry.inputs, entry.vjp(upstream)):
            if grad is None or not value.requires_grad:
                continue
            key = id(value)
            # values feeding several ops accumulate additively
            grads[key] = grads[key] + grad if key in grads else np.asarray(grad, dtype=kernels.DTYPE)
            values[key] = value

    return Gradients(grads, values)
