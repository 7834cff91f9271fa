"""Encoder transformer scoring (instruction, trajectory, objects) triples as
real or fake, plus both adversarial loss formulas."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import text as T
from .assembly import EmbeddingParams, Trajectory, assemble_discriminator_input, embed_sequence
from .autodiff import PROB_EPS, Tensor, add, as_tensor, clamp, index, layer_norm, log, matmul, mean, neg, sigmoid, sub
from .layers import TransformerStack, init_ones, init_weight, init_zeros, mask_to_bias
from .streams import Stream


@dataclass
class DiscriminatorConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    d_img: int = 32
    pooling: str = "cls"  # "cls" | "mean"


@dataclass
class RealFakeScore:
    probability: float  # clamped into [1e-7, 1-1e-7]
    label: int | None = None  # 1 real, 0 fake
    node: Tensor | None = field(default=None, repr=False)  # graph-connected probability


class EncoderModel:
    """Bidirectional encoder with a sigmoid real/fake head on the pooled state.

    Embedding tables are independent from the generator's: the two adversaries
    share nothing.
    """

    def __init__(self, cfg: DiscriminatorConfig, stream: Stream):
        self.cfg = cfg
        d = cfg.d_model
        if cfg.pooling not in ("cls", "mean"):
            raise ValueError(f"unknown pooling {cfg.pooling!r}")
        self.emb = EmbeddingParams(
            token_table=init_weight(stream.child("tok"), (cfg.vocab_size, d)),
            position_table=init_weight(stream.child("pos"), (cfg.max_seq_len, d)),
            segment_table=init_weight(stream.child("seg"), (3, d)),
            proj_w=init_weight(stream.child("proj"), (cfg.d_img, d)),
            proj_b=init_zeros(d),
        )
        self.stack = TransformerStack(cfg.n_layers, d, cfg.n_heads, cfg.d_ff, stream.child("stack"))
        self.ln_f_g = init_ones(d)
        self.ln_f_b = init_zeros(d)
        self.head_w = init_weight(stream.child("head"), (d, 1))
        self.head_b = init_zeros(1)

    def params(self) -> dict[str, Tensor]:
        out = self.emb.named("emb")
        out.update(self.stack.params("stack"))
        out["ln_f/g"] = self.ln_f_g
        out["ln_f/b"] = self.ln_f_b
        out["head/w"] = self.head_w
        out["head/b"] = self.head_b
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.params().values())

    def probability(self, traj: Trajectory, instruction, vocab: T.Vocab, *, use_objects: bool = True) -> Tensor:
        """Clamped P(real) as a graph-connected scalar tensor."""
        seq = assemble_discriminator_input(
            traj, instruction, vocab, use_objects=use_objects, max_seq_len=self.cfg.max_seq_len
        )
        h = self.stack.forward(embed_sequence(seq, self.emb), mask_to_bias(seq.attention_mask))
        h = layer_norm(h, self.ln_f_g, self.ln_f_b)
        if self.cfg.pooling == "cls":
            pooled = index(h, (slice(0, 1), slice(None)))
        else:
            pooled = mean_rows(h)
        logit = add(matmul(pooled, self.head_w), self.head_b)
        return clamp(sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)


def mean_rows(h: Tensor) -> Tensor:
    n = h.shape[0]
    weights = Tensor(np.full((1, n), 1.0 / n))
    return matmul(weights, h)


def score(model: EncoderModel, traj: Trajectory, instruction, vocab: T.Vocab, *, label: int | None = None, use_objects: bool = True) -> RealFakeScore:
    """D(instruction, trajectory) as a clamped probability.

    ``instruction`` is hard token ids or a Tensor of per-step distributions;
    one-hot rows score identically to the equivalent hard ids.
    """
    node = model.probability(traj, instruction, vocab, use_objects=use_objects)
    return RealFakeScore(probability=float(node.data.reshape(())), label=label, node=node)


def _as_prob(p) -> Tensor:
    if isinstance(p, RealFakeScore):
        p = p.node if p.node is not None else p.probability
    t = as_tensor(p)
    return clamp(reshape_scalar(t), PROB_EPS, 1.0 - PROB_EPS)


def reshape_scalar(t: Tensor) -> Tensor:
    if t.data.size != 1:
        raise ValueError("probability must be scalar")
    from .autodiff import reshape

    return reshape(t, ())


def adversarial_generator_loss(p_fake) -> Tensor:
    """-log D(fake): the generator wants its fakes scored real."""
    return neg(log(_as_prob(p_fake)))


def discriminator_loss(p_fake, p_real) -> Tensor:
    """-log(1 - D(fake)) - log D(real)."""
    pf = _as_prob(p_fake)
    pr = _as_prob(p_real)
    return add(neg(log(sub(Tensor(1.0), pf))), neg(log(pr)))
