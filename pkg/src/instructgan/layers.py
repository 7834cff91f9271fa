"""Pre-norm transformer blocks shared by the generator and the discriminator."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, concat, gelu, index, layer_norm, matmul, scale, softmax, transpose
from .streams import Stream

INIT_SCALE = 0.02
MASK_BIAS = -1e9


def init_weight(stream: Stream, shape) -> Tensor:
    return Tensor(stream.normal(shape, scale=INIT_SCALE), requires_grad=True)


def init_zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def mask_to_bias(mask: np.ndarray) -> np.ndarray:
    """Boolean attend-matrix to additive bias (0 where allowed, -1e9 where not)."""
    return np.where(mask, 0.0, MASK_BIAS)


class TransformerStack:
    """L pre-norm blocks: self-attention with H heads, then a 4x feed-forward."""

    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_ff: int, stream: Stream):
        if d_model % n_heads:
            raise ValueError("d_model must divide evenly into heads")
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.blocks = []
        for i in range(n_layers):
            s = stream.child("block", i)
            self.blocks.append(
                {
                    "ln1_g": init_ones(d_model),
                    "ln1_b": init_zeros(d_model),
                    "wq": init_weight(s.child("wq"), (d_model, d_model)),
                    "bq": init_zeros(d_model),
                    "wk": init_weight(s.child("wk"), (d_model, d_model)),
                    "bk": init_zeros(d_model),
                    "wv": init_weight(s.child("wv"), (d_model, d_model)),
                    "bv": init_zeros(d_model),
                    "wo": init_weight(s.child("wo"), (d_model, d_model)),
                    "bo": init_zeros(d_model),
                    "ln2_g": init_ones(d_model),
                    "ln2_b": init_zeros(d_model),
                    "w1": init_weight(s.child("w1"), (d_model, d_ff)),
                    "b1": init_zeros(d_ff),
                    "w2": init_weight(s.child("w2"), (d_ff, d_model)),
                    "b2": init_zeros(d_model),
                }
            )

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            for name, tensor in block.items():
                out[f"{prefix}/block{i}/{name}"] = tensor
        return out

    def forward(self, x: Tensor, mask_bias: np.ndarray) -> Tensor:
        bias = Tensor(mask_bias)
        inv_sqrt = 1.0 / np.sqrt(self.d_head)
        for block in self.blocks:
            h = layer_norm(x, block["ln1_g"], block["ln1_b"])
            q = add(matmul(h, block["wq"]), block["bq"])
            k = add(matmul(h, block["wk"]), block["bk"])
            v = add(matmul(h, block["wv"]), block["bv"])
            heads = []
            for i in range(self.n_heads):
                cols = (slice(None), slice(i * self.d_head, (i + 1) * self.d_head))
                qi, ki, vi = index(q, cols), index(k, cols), index(v, cols)
                scores = add(scale(matmul(qi, transpose(ki)), inv_sqrt), bias)
                heads.append(matmul(softmax(scores, axis=-1), vi))
            attn = concat(heads, axis=1) if self.n_heads > 1 else heads[0]
            x = add(x, add(matmul(attn, block["wo"]), block["bo"]))
            h2 = layer_norm(x, block["ln2_g"], block["ln2_b"])
            f = add(matmul(gelu(add(matmul(h2, block["w1"]), block["b1"])), block["w2"]), block["b2"])
            x = add(x, f)
        return x
