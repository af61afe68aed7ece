"""Graph heads operating on per-pixel node features.

* ``gcn_layer`` / ``gcn_stack_forward``: the symmetric-normalised GCN layer.
* ``ggcn_step`` / ``ggcn_forward``: GCN messages feeding a GRU state update.
* ``ggnn_baseline_step``: same GRU, but messages are an un-normalised linear
  neighbour sum.
* ``predict``: linear classifier over the final node states.

Weights act on row-vector features, so the per-node product ``W h`` is written
``H @ W`` for the whole N x F state matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class GcnLayerParams:
    W: Tensor
    bias: Optional[Tensor] = None

    @classmethod
    def init(cls, f_in: int, f_out: int, rng: np.random.Generator, bias: bool = False):
        b = Tensor(np.zeros(f_out), requires_grad=True) if bias else None
        return cls(glorot(rng, (f_in, f_out), f_in, f_out), b)

    def tensors(self) -> dict:
        out = {"W": self.W}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


GGCN_WEIGHTS = ("W_msg", "W_r", "U_r", "W_z", "U_z", "W_cand", "U_cand")


@dataclass
class GgcnParams:
    """Square F x F weights shared by every propagation timestep."""

    W_msg: Tensor
    W_r: Tensor
    U_r: Tensor
    W_z: Tensor
    U_z: Tensor
    W_cand: Tensor
    U_cand: Tensor

    @classmethod
    def init(cls, f: int, rng: np.random.Generator) -> "GgcnParams":
        return cls(*(glorot(rng, (f, f), f, f) for _ in GGCN_WEIGHTS))

    @classmethod
    def constant(cls, f: int, value: float = 0.0) -> "GgcnParams":
        return cls(*(Tensor(np.full((f, f), value), requires_grad=True) for _ in GGCN_WEIGHTS))

    @property
    def width(self) -> int:
        return self.W_msg.shape[0]

    def tensors(self) -> dict:
        return {k: getattr(self, k) for k in GGCN_WEIGHTS}

    def check(self):
        f = self.width
        for k in GGCN_WEIGHTS:
            if getattr(self, k).shape != (f, f):
                raise DimensionError(f"{k} must be {f}x{f}, got {getattr(self, k).shape}")


@dataclass
class GgcnState:
    h: Tensor
    a: Tensor
    r: Tensor
    z: Tensor
    h_cand: Tensor
    t: int


@dataclass
class HeadParams:
    W_out: Tensor
    bias: Optional[Tensor] = None

    @classmethod
    def init(cls, f: int, n_classes: int, rng: np.random.Generator, bias: bool = False) -> "HeadParams":
        if n_classes < 2:
            raise ConfigurationError("classifier needs at least 2 classes")
        b = Tensor(np.zeros(n_classes), requires_grad=True) if bias else None
        return cls(glorot(rng, (f, n_classes), f, n_classes), b)

    def tensors(self) -> dict:
        out = {"W_out": self.W_out}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


def _check_nodes(g, h: Tensor):
    if h.ndim != 2 or h.shape[0] != g.num_nodes:
        raise DimensionError(f"graph has {g.num_nodes} nodes, features have shape {h.shape}")


def gcn_layer(g, params: GcnLayerParams, h_in: Tensor) -> Tensor:
    """relu(P (H W) + b) with P the normalised propagation matrix; H W is formed first."""
    _check_nodes(g, h_in)
    if h_in.shape[1] != params.W.shape[0]:
        raise DimensionError(f"layer expects width {params.W.shape[0]}, got {h_in.shape[1]}")
    x = ad.spmm(g, h_in @ params.W)
    if params.bias is not None:
        x = x + params.bias
    return ad.relu(x)


def gcn_stack_forward(g, layers, h0: Tensor) -> Tensor:
    if not layers:
        raise ConfigurationError("gcn stack needs at least one layer")
    for i in range(1, len(layers)):
        if layers[i].W.shape[0] != layers[i - 1].W.shape[1]:
            raise DimensionError(f"layer {i} input width {layers[i].W.shape[0]} "
                                 f"does not match previous output {layers[i - 1].W.shape[1]}")
    h = h0
    for layer in layers:
        h = gcn_layer(g, layer, h)
    return h


def _gru(p: GgcnParams, h_prev: Tensor, a: Tensor, t: int, z_offset: float) -> GgcnState:
    r = ad.sigmoid(h_prev @ p.W_r + a @ p.U_r)
    z_logit = h_prev @ p.W_z + a @ p.U_z
    if z_offset:
        z_logit = z_logit + z_offset
    z = ad.sigmoid(z_logit)
    h_cand = ad.tanh((r * h_prev) @ p.W_cand + a @ p.U_cand)
    h = (1.0 - z) * h_prev + z * h_cand
    return GgcnState(h=h, a=a, r=r, z=z, h_cand=h_cand, t=t)


def _check_state(g, p: GgcnParams, h_prev: Tensor):
    _check_nodes(g, h_prev)
    p.check()
    if h_prev.shape[1] != p.width:
        raise DimensionError(f"state width {h_prev.shape[1]} does not match weights {p.width}")


def ggcn_step(g, p: GgcnParams, h_prev: Tensor, t: int = 1, *, z_offset: float = 0.0) -> GgcnState:
    """One gated propagation step with a GCN message.

    ``z_offset`` is added to the update-gate logits; it exists so tests can
    pin the gate to 0 or 1 and defaults to a no-op.
    """
    _check_state(g, p, h_prev)
    a = ad.relu(ad.spmm(g, h_prev @ p.W_msg))
    return _gru(p, h_prev, a, t, z_offset)


def ggnn_baseline_step(g, p: GgcnParams, h_prev: Tensor, t: int = 1, *, z_offset: float = 0.0) -> GgcnState:
    """GRU step whose message is the raw neighbour sum (A + I)(H W_msg)."""
    _check_state(g, p, h_prev)
    a = ad.spmm(g, h_prev @ p.W_msg, normalized=False)
    return _gru(p, h_prev, a, t, z_offset)


def _unroll(step, g, p, h0, timesteps):
    if timesteps < 1:
        raise ConfigurationError(f"timesteps must be >= 1, got {timesteps}")
    h = h0
    for t in range(1, timesteps + 1):
        h = step(g, p, h, t).h
    return h


def ggcn_forward(g, p: GgcnParams, h0: Tensor, timesteps: int) -> Tensor:
    return _unroll(ggcn_step, g, p, h0, timesteps)


def ggnn_forward(g, p: GgcnParams, h0: Tensor, timesteps: int) -> Tensor:
    return _unroll(ggnn_baseline_step, g, p, h0, timesteps)


def predict(head: HeadParams, h_final: Tensor):
    """Class logits per node and the argmax (ties go to the lowest index)."""
    if h_final.shape[1] != head.W_out.shape[0]:
        raise DimensionError(f"head expects width {head.W_out.shape[0]}, got {h_final.shape[1]}")
    logits = h_final @ head.W_out
    if head.bias is not None:
        logits = logits + head.bias
    return logits, np.argmax(logits.data, axis=1)


def probabilities(logits: Tensor) -> np.ndarray:
    return np.exp(ad.log_softmax(logits.data))
