"""Reverse-mode automatic differentiation over dense 4-D arrays.

A `Tensor` wraps an (N, C, H, W) numpy array plus, when it participates in
differentiation, links to its parents and a closure that maps the
incoming output gradient to per-parent gradient contributions.  Calling
`backward(loss)` on a scalar (1,1,1,1) tensor walks the tape once in
reverse topological order, then adds the pass's gradients into the
`.grad` accumulators of every `requires_grad` tensor it reached, so
repeated backward calls accumulate additively and disconnected tensors
keep their zeros.

Precision is parametric: float32 for training throughput, float64 for
gradient checks.  Mixing dtypes in one op is an error; cast explicitly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = ["Tensor", "backward"]

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense 4-D value node of the autodiff tape."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        values = np.asarray(values, dtype=dtype)
        if values.ndim != 4:
            raise ValueError(
                f"tensors are 4-D (N, C, H, W); got shape {values.shape}"
            )
        if values.dtype not in _ALLOWED:
            raise ValueError(f"dtype must be float32/float64, got {values.dtype}")
        self.values = values
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(values) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence] | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """A view of the same values with no tape history."""
        return Tensor(self.values, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


def from_op(
    values: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Sequence],
) -> Tensor:
    """Result node: keeps tape links only if some parent needs gradients.

    `backward_fn(grad_out)` must return one gradient array (or None) per
    parent, in parent order.
    """
    out = Tensor(values, requires_grad=False)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = np.zeros_like(values)
        out._parents = parents
        out._backward = backward_fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS over parents; each node appears once."""
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(tensor) into `.grad` across the tape.

    `loss` must be scalar-shaped (1, 1, 1, 1).  Each reachable node is
    visited exactly once; gradients for the pass are kept in a side table
    and added into the accumulators at the end, so a second backward call
    adds another full pass (no double counting within one pass).
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require gradients; nothing to do")
    order = _toposort(loss)
    pass_grad: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.values)
    }
    for node in reversed(order):
        grad_out = pass_grad.get(id(node))
        if grad_out is None or node._backward is None:
            continue
        contributions = node._backward(grad_out)
        if len(contributions) != len(node._parents):
            raise RuntimeError(
                "backward closure returned wrong number of gradients"
            )
        for parent, contrib in zip(node._parents, contributions):
            if contrib is None or not parent.requires_grad:
                continue
            if contrib.shape != parent.values.shape:
                raise RuntimeError(
                    f"gradient shape {contrib.shape} != parent "
                    f"{parent.values.shape}"
                )
            key = id(parent)
            if key in pass_grad:
                pass_grad[key] += contrib
            else:
                pass_grad[key] = contrib.astype(parent.dtype, copy=True)
    for node in order:
        g = pass_grad.get(id(node))
        if g is not None and node.grad is not None:
            node.grad += g
