"""A small tape-based reverse-mode differentiation engine.

Only the handful of ops a stack of linear layers needs: matmul with bias,
relu, log-softmax, and a compressed linear op whose backward pass is the
straight-through estimator. Every node records its value and a closure that
maps the upstream gradient to gradients of its inputs. Values keep the dtype
of the inputs, so the same graph runs in float32 or in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidShape, InvalidState
from .quant import QuantScheme, dequantize, quantize_weight, quantized_matmul_ref
from .sparse import SparsityMask, prune


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: Callable | None = None
    param: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class Graph:
    parameters: dict[str, np.ndarray]
    nodes: list[Node] = field(default_factory=list)
    gradients: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0
    consumed: bool = False

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def value(self, i: int) -> np.ndarray:
        return self.nodes[i].value

    def input(self, x) -> int:
        return self._push(Node("input", (), np.asarray(x)))

    def param(self, name: str) -> int:
        return self._push(Node("param", (), self.parameters[name], param=name))

    def linear(self, x: int, w: int, b: int | None = None) -> int:
        X, W = self.value(x), self.value(w)
        if X.ndim != 2 or X.shape[1] != W.shape[0]:
            raise InvalidShape(f"linear: {X.shape} x {W.shape}")
        Y = X @ W
        if b is not None:
            Y = Y + self.value(b)

        def vjp(g):
            grads = [g @ W.T, X.T @ g]
            if b is not None:
                grads.append(g.sum(axis=0))
            return grads

        return self._push(Node("linear", (x, w) + ((b,) if b is not None else ()), Y, vjp))

    def compressed_linear(
        self,
        x: int,
        w: int,
        b: int | None,
        scheme: QuantScheme | None,
        mask: SparsityMask | None,
    ) -> int:
        """Prune, quantize, run the native quantized matmul.

        Backward treats rounding as identity and scales as constants, so
        ``dW = X^T g`` (masked), exactly as for a dense layer.
        """
        X, W = self.value(x), self.value(w)
        if X.ndim != 2 or X.shape[1] != W.shape[0]:
            raise InvalidShape(f"linear: {X.shape} x {W.shape}")
        W_masked = prune(W, mask) if mask is not None else W
        if scheme is not None:
            q = quantize_weight(W_masked, scheme)
            Y = quantized_matmul_ref(X, q).astype(X.dtype)
            W_eff = dequantize(q).astype(X.dtype)
        else:
            Y = X @ W_masked
            W_eff = W_masked
        if b is not None:
            Y = Y + self.value(b)
        keep = mask.as_float(X.dtype) if mask is not None else None

        def vjp(g):
            gw = X.T @ g
            if keep is not None:
                gw = gw * keep
            grads = [g @ W_eff.T, gw]
            if b is not None:
                grads.append(g.sum(axis=0))
            return grads

        inputs = (x, w) + ((b,) if b is not None else ())
        return self._push(Node("compressed_linear", inputs, Y, vjp))

    def relu(self, x: int) -> int:
        X = self.value(x)
        on = X > 0
        return self._push(Node("relu", (x,), np.where(on, X, 0).astype(X.dtype), lambda g: [g * on]))

    def log_softmax(self, x: int) -> int:
        X = self.value(x)
        shifted = X - X.max(axis=-1, keepdims=True)
        Y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        P = np.exp(Y)

        def vjp(g):
            return [g - P * g.sum(axis=-1, keepdims=True)]

        return self._push(Node("log_softmax", (x,), Y, vjp))

    def backward(self, out: int, seed: np.ndarray) -> dict[str, np.ndarray]:
        """Accumulate gradients from node ``out`` back to every parameter."""
        if self.consumed:
            raise InvalidState("graph already differentiated; run a new forward pass")
        seed = np.asarray(seed)
        if seed.shape != self.nodes[out].shape:
            raise InvalidShape(f"seed gradient {seed.shape} != output {self.nodes[out].shape}")
        adj: dict[int, np.ndarray] = {out: seed}
        for i in range(out, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            if node.param is not None:
                prev = self.gradients.get(node.param)
                self.gradients[node.param] = g if prev is None else prev + g
                continue
            if node.vjp is None:
                continue
            for j, gj in zip(node.inputs, node.vjp(g)):
                adj[j] = gj if j not in adj else adj[j] + gj
        self.consumed = True
        return self.gradients
