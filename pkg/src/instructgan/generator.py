"""Decoder transformer: teacher-forced training, decoding, and the
differentiable Gumbel-Softmax generation path."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import text as T
from .assembly import SEG_TEXT, AssembledSequence, EmbeddingParams, Trajectory, assemble_generator_input, embed_sequence
from .autodiff import (
    Tensor,
    concat,
    cross_entropy,
    gumbel_softmax,
    index,
    layer_norm,
    matmul,
    softmax,
    straight_through,
    transpose,
)
from .layers import TransformerStack, init_ones, init_weight, init_zeros, mask_to_bias
from .streams import Stream


@dataclass
class GeneratorConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    max_instruction_len: int = 24
    d_img: int = 32
    prefix_visible: bool = False


@dataclass
class GenerationResult:
    """Hard ids plus, in adversarial mode, the per-step soft distributions."""

    ids: list[int]
    logprobs: list[float]
    stop_reason: str  # "eos" | "max_len"
    soft: np.ndarray | None = None  # (steps, vocab)
    soft_nodes: Tensor | None = field(default=None, repr=False)  # graph-connected rows

    @property
    def body_ids(self) -> list[int]:
        """Generated ids without the trailing EOS."""
        return self.ids[:-1] if self.stop_reason == "eos" else list(self.ids)


class DecoderModel:
    """GPT-style causal decoder with the output head tied to the token table."""

    def __init__(self, cfg: GeneratorConfig, stream: Stream):
        self.cfg = cfg
        d = cfg.d_model
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

    def params(self) -> dict[str, Tensor]:
        out = self.emb.named("emb")
        out.update(self.stack.params("stack"))
        out["ln_f/g"] = self.ln_f_g
        out["ln_f/b"] = self.ln_f_b
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.params().values())

    def hidden(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.stack.forward(x, mask_to_bias(mask))
        return layer_norm(h, self.ln_f_g, self.ln_f_b)

    def logits(self, hidden_rows: Tensor) -> Tensor:
        return matmul(hidden_rows, transpose(self.emb.token_table))

    def forward(self, seq: AssembledSequence) -> Tensor:
        return self.hidden(embed_sequence(seq, self.emb), seq.attention_mask)

    def _causal_mask(self, n: int, prefix: int) -> np.ndarray:
        mask = np.tril(np.ones((n, n), dtype=bool))
        if self.cfg.prefix_visible:
            mask[:prefix, :prefix] = True
        return mask


def teacher_forced_loss(model: DecoderModel, traj: Trajectory, reference_ids, vocab: T.Vocab, *, use_objects: bool = True):
    """Cross-entropy over the text positions only: BOS predicts the first token,
    each token predicts its successor, the last token predicts EOS.

    Returns (scalar loss, per-step logits) with one logits row per text step.
    """
    reference_ids = [int(i) for i in reference_ids]
    if not reference_ids:
        raise ValueError("reference instruction must be non-empty")
    seq = assemble_generator_input(
        traj,
        reference_ids,
        vocab,
        teacher_forcing=True,
        use_objects=use_objects,
        max_seq_len=model.cfg.max_seq_len,
        prefix_visible=model.cfg.prefix_visible,
    )
    h = model.forward(seq)
    prefix = seq.length - len(reference_ids) - 2  # slots before BOS
    rows = index(h, (slice(prefix, prefix + len(reference_ids) + 1), slice(None)))
    logits = model.logits(rows)
    targets = np.array(reference_ids + [T.EOS], dtype=np.int64)
    return cross_entropy(logits, targets), logits


def _prompt(model: DecoderModel, traj: Trajectory, vocab: T.Vocab, use_objects: bool):
    seq = assemble_generator_input(
        traj,
        [],
        vocab,
        teacher_forcing=False,
        use_objects=use_objects,
        max_seq_len=model.cfg.max_seq_len,
        prefix_visible=model.cfg.prefix_visible,
    )
    return embed_sequence(seq, model.emb), seq.length


def _next_logits(model: DecoderModel, embeds: list[Tensor], prefix: int) -> Tensor:
    x = concat(embeds, axis=0) if len(embeds) > 1 else embeds[0]
    n = x.shape[0]
    h = model.hidden(x, model._causal_mask(n, prefix))
    return model.logits(index(h, (slice(n - 1, n), slice(None))))  # (1, vocab)


def _token_embed(model: DecoderModel, row: Tensor, position: int) -> Tensor:
    """Embedding of one generated token slot from its (soft or one-hot) row."""
    content = matmul(row, model.emb.token_table)
    pos = index(model.emb.position_table, (slice(position, position + 1), slice(None)))
    seg = index(model.emb.segment_table, (slice(SEG_TEXT, SEG_TEXT + 1), slice(None)))
    return content + pos + seg


def _cap_steps(model: DecoderModel, max_len: int, prefix_len: int) -> int:
    allowed = model.cfg.max_seq_len - prefix_len
    if allowed < 1:
        raise ValueError("prompt leaves no room to generate within max_seq_len")
    return min(max_len, allowed)


def decode_greedy(model: DecoderModel, traj: Trajectory, vocab: T.Vocab, max_len: int | None = None, *, use_objects: bool = True) -> GenerationResult:
    """Deterministic argmax decoding; ties break toward the lowest token id."""
    max_len = model.cfg.max_instruction_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    embeds, prefix_len = _prompt(model, traj, vocab, use_objects)
    max_len = _cap_steps(model, max_len, prefix_len)
    embeds = [embeds]
    ids: list[int] = []
    logprobs: list[float] = []
    stop = "max_len"
    for step in range(max_len):
        logits = _next_logits(model, embeds, prefix_len - 1)
        probs = softmax(logits, axis=-1).data[0]
        token = int(np.argmax(probs))
        ids.append(token)
        logprobs.append(float(np.log(probs[token])))
        if token == T.EOS:
            stop = "eos"
            break
        onehot = np.zeros((1, model.cfg.vocab_size))
        onehot[0, token] = 1.0
        embeds.append(_token_embed(model, Tensor(onehot), prefix_len + step))
    return GenerationResult(ids=ids, logprobs=logprobs, stop_reason=stop)


def sample_decode(
    model: DecoderModel,
    traj: Trajectory,
    vocab: T.Vocab,
    temperature: float,
    stream: Stream,
    max_len: int | None = None,
    *,
    use_objects: bool = True,
) -> GenerationResult:
    """Categorical sampling from the temperature-scaled softmax."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    max_len = model.cfg.max_instruction_len if max_len is None else max_len
    embeds, prefix_len = _prompt(model, traj, vocab, use_objects)
    max_len = _cap_steps(model, max_len, prefix_len)
    embeds = [embeds]
    ids: list[int] = []
    logprobs: list[float] = []
    stop = "max_len"
    for step in range(max_len):
        logits = _next_logits(model, embeds, prefix_len - 1)
        probs = softmax(Tensor(logits.data / temperature)).data[0]
        token = stream.child("step", step).choice(probs.size, p=probs)
        ids.append(token)
        logprobs.append(float(np.log(softmax(logits).data[0][token])))
        if token == T.EOS:
            stop = "eos"
            break
        onehot = np.zeros((1, model.cfg.vocab_size))
        onehot[0, token] = 1.0
        embeds.append(_token_embed(model, Tensor(onehot), prefix_len + step))
    return GenerationResult(ids=ids, logprobs=logprobs, stop_reason=stop)


def generate_soft(
    model: DecoderModel,
    traj: Trajectory,
    vocab: T.Vocab,
    tau: float,
    stream: Stream,
    max_len: int | None = None,
    *,
    use_objects: bool = True,
    straight_through_mode: bool = True,
    stop_at_eos: bool = True,
) -> GenerationResult:
    """Autoregressive Gumbel-Softmax generation with gradients to all parameters.

    Each step perturbs the next-token logits with fresh Gumbel noise from
    ``stream``, takes the tempered softmax, and feeds the next slot embedding:
    the hard argmax row in straight-through mode (soft gradients), or the soft
    row itself otherwise.  ``soft_nodes`` keeps the graph-connected rows that
    the discriminator consumes.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    max_len = model.cfg.max_instruction_len if max_len is None else max_len
    embeds, prefix_len = _prompt(model, traj, vocab, use_objects)
    max_len = _cap_steps(model, max_len, prefix_len)
    embeds = [embeds]
    ids: list[int] = []
    logprobs: list[float] = []
    rows: list[Tensor] = []
    soft_values: list[np.ndarray] = []
    stop = "max_len"
    for step in range(max_len):
        logits = _next_logits(model, embeds, prefix_len - 1)
        noise = stream.child("gumbel", step).gumbel(logits.shape)
        soft = gumbel_softmax(logits, tau, noise)
        token = int(np.argmax(soft.data[0]))
        ids.append(token)
        logprobs.append(float(np.log(softmax(logits).data[0][token])))
        soft_values.append(soft.data[0].copy())
        if straight_through_mode:
            onehot = np.zeros((1, model.cfg.vocab_size))
            onehot[0, token] = 1.0
            row = straight_through(soft, onehot)
        else:
            row = soft
        rows.append(row)
        if stop_at_eos and token == T.EOS:
            stop = "eos"
            break
        embeds.append(_token_embed(model, row, prefix_len + step))
    soft_nodes = concat(rows, axis=0) if len(rows) > 1 else rows[0]
    return GenerationResult(
        ids=ids,
        logprobs=logprobs,
        stop_reason=stop,
        soft=np.vstack(soft_values),
        soft_nodes=soft_nodes,
    )
