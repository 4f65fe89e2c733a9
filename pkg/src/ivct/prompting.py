"""View-aware prompts: sampling vector -> one channel vector per stage."""

from __future__ import annotations

import numpy as np

from .autograd import ShapeError, Tensor, relu
from .autograd.tensor import add, mul, reshape
from .nn import Linear, Module
from .sampling import SamplingVector

StagePrompts = list  # list[Tensor], one [N, C_stage] tensor per stage


class ViewPrompter(Module):
    """Two-layer ReLU trunk followed by one linear head per stage.

    Head biases start at one so that a freshly built network is not stuck at
    the identity (a zero prompt switches every block off).
    """

    def __init__(self, rng, n_full: int, stage_dims, hidden=(128, 64), head_bias: float = 1.0, dtype=np.float32):
        self.n_full = n_full
        self.trunk = [Linear(rng, n_full, hidden[0], dtype=dtype), Linear(rng, hidden[0], hidden[1], dtype=dtype)]
        self.heads = [Linear(rng, hidden[1], c, dtype=dtype) for c in stage_dims]
        for head in self.heads:
            head.bias.data[:] = head_bias

    def forward(self, v) -> StagePrompts:
        return encode_prompts(self, v)


def _as_batch(v, n_full: int, dtype) -> Tensor:
    if isinstance(v, SamplingVector):
        v = v.bits
    if isinstance(v, Tensor):
        v = v.data
    arr = np.asarray(v, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != n_full:
        raise ShapeError(f"sampling vector of length {arr.shape[-1]} given to a prompter built for {n_full}")
    return Tensor(arr)


def encode_prompts(prompter: ViewPrompter, v) -> StagePrompts:
    """Prompts for one vector (shape [1, C]) or a batch of vectors ([N, C])."""
    dtype = prompter.trunk[0].weight.dtype
    h = _as_batch(v, prompter.n_full, dtype)
    for layer in prompter.trunk:
        h = relu(layer(h))
    return [head(h) for head in prompter.heads]


def zero_prompts(stage_dims, batch: int = 1, dtype=np.float32) -> StagePrompts:
    return [Tensor(np.zeros((batch, c), dtype)) for c in stage_dims]


def modulate(h: Tensor, p: Tensor, f) -> Tensor:
    """``h + p * f(h)`` with ``p`` broadcast over space; ``f`` may be a precomputed tensor."""
    out = f(h) if callable(f) else f
    p = p if isinstance(p, Tensor) else Tensor(p)
    if p.ndim == 1:
        p = reshape(p, (1, -1))
    if p.shape[-1] != h.shape[1] or out.shape != h.shape:
        raise ShapeError(f"prompt of {p.shape[-1]} channels for features {h.shape}")
    return add(h, mul(reshape(p, (p.shape[0], p.shape[1], 1, 1)), out))
