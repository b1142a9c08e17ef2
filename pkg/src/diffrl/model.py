"""MLP noise predictor: [x_t, time features, context] -> tanh hidden layers -> eps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, ShapeError

TIME_FEATURES = 8


def time_embedding(t, T: int) -> np.ndarray:
    """Sin/cos features of t/T at frequencies 2^k, k = 0..3. Returns (n, 8)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    phase = (t / T)[:, None] * np.pi * (2.0 ** np.arange(TIME_FEATURES // 2))[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


@dataclass
class DenoiserParams:
    """Layer weights W_i (fan_in, fan_out) and biases b_i, plus the sizes that define them."""

    sample_dim: int
    context_dim: int
    hidden: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.sample_dim + TIME_FEATURES + self.context_dim

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.sample_dim]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def init(cls, sample_dim: int, context_dim: int, hidden=(64, 64), rng=None) -> "DenoiserParams":
        rng = np.random.default_rng(rng)
        sizes = [sample_dim + TIME_FEATURES + context_dim, *hidden, sample_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            biases.append(np.zeros(fan_out))
        return cls(sample_dim, context_dim, tuple(hidden), weights, biases)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "DenoiserParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"flat parameter vector shape {vec.shape} vs expected ({self.size},)")
        weights, biases, i = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[i : i + w.size].reshape(w.shape).copy())
            i += w.size
            biases.append(vec[i : i + b.size].copy())
            i += b.size
        return DenoiserParams(self.sample_dim, self.context_dim, self.hidden, weights, biases)

    def context_mask(self) -> np.ndarray:
        """Flat boolean mask, True on first-layer weights that read the context embedding."""
        masks = [np.zeros(a.shape, dtype=bool) for a in self.arrays()]
        masks[0][self.sample_dim + TIME_FEATURES :, :] = True
        return np.concatenate([m.ravel() for m in masks])

    def copy(self) -> "DenoiserParams":
        return self.with_flat(self.flat())


def _check_inputs(params: DenoiserParams, x, temb, cemb) -> None:
    if x.ndim != 2 or x.shape[1] != params.sample_dim:
        raise ShapeError(f"sample input shape {x.shape} vs expected (n, {params.sample_dim})")
    if temb.shape != (x.shape[0], TIME_FEATURES):
        raise ShapeError(f"time embedding shape {temb.shape} vs expected ({x.shape[0]}, {TIME_FEATURES})")
    if cemb.shape != (x.shape[0], params.context_dim):
        raise ShapeError(f"context embedding shape {cemb.shape} vs expected ({x.shape[0]}, {params.context_dim})")


def mlp_forward(params: DenoiserParams, x: np.ndarray, time_embed: np.ndarray, context_embed: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass, used for sampling where no gradient is needed."""
    x = np.atleast_2d(x)
    _check_inputs(params, x, time_embed, context_embed)
    h = np.concatenate([x, time_embed, context_embed], axis=1)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
    return h


class ParamNodes:
    """Graph leaves for one DenoiserParams, in ``arrays()`` order."""

    def __init__(self, graph: Graph, params: DenoiserParams):
        self.params = params
        self.weights = [graph.leaf(w) for w in params.weights]
        self.biases = [graph.leaf(b) for b in params.biases]

    def leaves(self) -> list[Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat_grad(self, grads: dict[int, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[n.id].ravel() for n in self.leaves()])


def mlp_graph(graph: Graph, pn: ParamNodes, x: Node, time_embed: np.ndarray, context_embed: np.ndarray) -> Node:
    _check_inputs(pn.params, x.value, time_embed, context_embed)
    h = graph.concat_cols([x, graph.const(time_embed), graph.const(context_embed)])
    last = len(pn.weights) - 1
    for i, (w, b) in enumerate(zip(pn.weights, pn.biases)):
        h = graph.add_row(graph.matmul(h, w), b)
        if i < last:
            h = graph.tanh(h)
    return h
