"""Flattened multimodal input sequences for the two transformers.

Generator layout:      [V visual slots][O object tokens][BOS, text..., (EOS)]
Discriminator layout:  [CLS][V visual slots][SEP][O object tokens][SEP][text][SEP]

Each slot carries a position id (0..N-1), a segment id (0 visual / 1 object /
2 text; separators take the segment of the block they close), and the square
attention mask is causal for the generator, all-ones for the discriminator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import text as T
from .autodiff import Tensor, add, concat, embedding, matmul

SEG_VISUAL, SEG_OBJECT, SEG_TEXT = 0, 1, 2


@dataclass
class Trajectory:
    """One episode: per-step visual features, final-view object labels, references."""

    episode_id: str
    features: np.ndarray  # (T, d_img)
    objects: list[str]
    references: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.episode_id}: features must be (T>=1, d_img)")
        if len(self.references) > 3:
            raise ValueError(f"{self.episode_id}: at most 3 references")

    @property
    def n_steps(self) -> int:
        return self.features.shape[0]

    @property
    def d_img(self) -> int:
        return self.features.shape[1]


@dataclass
class AssembledSequence:
    kind: str  # "generator" | "discriminator"
    visual: np.ndarray  # (V, d_img)
    object_ids: np.ndarray  # (O,)
    text_ids: np.ndarray  # generator: BOS..(EOS); discriminator: bare ids (empty if soft)
    position_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray  # (N, N) bool
    token_slots: np.ndarray  # (N,) full per-slot ids, -1 where not a hard token
    soft_text: Tensor | None = None  # (S, vocab) distribution rows, discriminator only
    soft_start: int = -1

    @property
    def length(self) -> int:
        return self.position_ids.shape[0]


def _layout(kind, visual, object_ids, text_ids, n_soft, use_objects, max_seq_len, prefix_visible):
    v = visual.shape[0]
    o = len(object_ids) if use_objects else 0
    object_ids = np.asarray(object_ids[:o] if use_objects else [], dtype=np.int64)
    s = len(text_ids) if n_soft == 0 else n_soft
    if kind == "generator":
        slots = np.concatenate([np.full(v, -1, dtype=np.int64), object_ids, np.asarray(text_ids, dtype=np.int64)])
        segments = np.concatenate([np.zeros(v, np.int64), np.full(o, SEG_OBJECT, np.int64), np.full(s, SEG_TEXT, np.int64)])
        soft_start = -1
    else:
        parts = [np.array([T.CLS], np.int64), np.full(v, -1, np.int64), np.array([T.SEP], np.int64)]
        segs = [np.zeros(v + 2, np.int64)]
        if use_objects:
            parts += [object_ids, np.array([T.SEP], np.int64)]
            segs.append(np.full(o + 1, SEG_OBJECT, np.int64))
        soft_start = sum(len(p) for p in parts)
        if n_soft:
            parts.append(np.full(n_soft, -1, np.int64))
        else:
            parts.append(np.asarray(text_ids, dtype=np.int64))
        parts.append(np.array([T.SEP], np.int64))
        segs.append(np.full(s + 1, SEG_TEXT, np.int64))
        slots = np.concatenate(parts)
        segments = np.concatenate(segs)
    n = slots.shape[0]
    if n > max_seq_len:
        raise ValueError(f"assembled length {n} exceeds max_seq_len {max_seq_len}")
    positions = np.arange(n, dtype=np.int64)
    if kind == "generator":
        mask = np.tril(np.ones((n, n), dtype=bool))
        if prefix_visible:
            prefix = v + o
            mask[:prefix, :prefix] = True
    else:
        mask = np.ones((n, n), dtype=bool)
    return slots, segments, positions, mask, object_ids, soft_start


def assemble_generator_input(
    traj: Trajectory,
    instruction_ids,
    vocab: T.Vocab,
    *,
    teacher_forcing: bool = True,
    use_objects: bool = True,
    max_seq_len: int = 64,
    prefix_visible: bool = False,
) -> AssembledSequence:
    """Prompt plus (optionally teacher-forced) instruction block.

    ``instruction_ids`` must not contain specials; BOS is prepended, and EOS
    appended only in teacher-forcing mode.  An empty instruction gives the
    generation-time prompt ending at BOS.
    """
    instruction_ids = [int(i) for i in instruction_ids]
    if any(i < T.N_SPECIALS for i in instruction_ids):
        raise ValueError("instruction ids must exclude special tokens")
    text_ids = [T.BOS] + instruction_ids + ([T.EOS] if teacher_forcing and instruction_ids else [])
    object_ids = [vocab.id_of(tok) for label in traj.objects for tok in T.tokenize(label)]
    slots, segments, positions, mask, object_arr, _ = _layout(
        "generator", traj.features, object_ids, text_ids, 0, use_objects, max_seq_len, prefix_visible
    )
    return AssembledSequence(
        kind="generator",
        visual=traj.features,
        object_ids=object_arr,
        text_ids=np.asarray(text_ids, dtype=np.int64),
        position_ids=positions,
        segment_ids=segments,
        attention_mask=mask,
        token_slots=slots,
    )


def assemble_discriminator_input(
    traj: Trajectory,
    instruction,
    vocab: T.Vocab,
    *,
    use_objects: bool = True,
    max_seq_len: int = 64,
) -> AssembledSequence:
    """CLS/SEP-delimited bidirectional layout scoring one instruction.

    ``instruction`` is either a list of hard token ids or a Tensor of
    per-step distributions over the vocabulary (rows sum to 1).
    """
    soft = None
    if isinstance(instruction, Tensor):
        soft = instruction
        if soft.ndim != 2 or soft.shape[1] != len(vocab):
            raise ValueError("soft instruction must be (steps, vocab)")
        text_ids: list[int] = []
        n_soft = soft.shape[0]
    else:
        text_ids = [int(i) for i in instruction]
        n_soft = 0
    object_ids = [vocab.id_of(tok) for label in traj.objects for tok in T.tokenize(label)]
    slots, segments, positions, mask, object_arr, soft_start = _layout(
        "discriminator", traj.features, object_ids, text_ids, n_soft, use_objects, max_seq_len, False
    )
    return AssembledSequence(
        kind="discriminator",
        visual=traj.features,
        object_ids=object_arr,
        text_ids=np.asarray(text_ids, dtype=np.int64),
        position_ids=positions,
        segment_ids=segments,
        attention_mask=mask,
        token_slots=slots,
        soft_text=soft,
        soft_start=soft_start if soft is not None else -1,
    )


@dataclass
class EmbeddingParams:
    """Learned tables plus the visual projection for one model."""

    token_table: Tensor  # (vocab, d)
    position_table: Tensor  # (max_seq_len, d)
    segment_table: Tensor  # (3, d)
    proj_w: Tensor  # (d_img, d)
    proj_b: Tensor  # (d,)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}/token_table": self.token_table,
            f"{prefix}/position_table": self.position_table,
            f"{prefix}/segment_table": self.segment_table,
            f"{prefix}/proj_w": self.proj_w,
            f"{prefix}/proj_b": self.proj_b,
        }


def embed_sequence(seq: AssembledSequence, emb: EmbeddingParams) -> Tensor:
    """Per-slot content embedding plus position and segment embeddings.

    Content is the projected visual feature for visual slots, a table row for
    hard tokens, and the distribution-weighted mixture of table rows for soft
    slots; for a one-hot row the mixture equals the hard row exactly.
    """
    blocks: list[Tensor] = []
    n = seq.length
    visual = add(matmul(Tensor(seq.visual), emb.proj_w), emb.proj_b)
    if seq.kind == "generator":
        blocks.append(visual)
        if seq.object_ids.size:
            blocks.append(embedding(emb.token_table, seq.object_ids))
        blocks.append(embedding(emb.token_table, seq.text_ids))
    else:
        blocks.append(embedding(emb.token_table, np.array([T.CLS])))
        blocks.append(visual)
        blocks.append(embedding(emb.token_table, np.array([T.SEP])))
        if seq.object_ids.size:
            blocks.append(embedding(emb.token_table, seq.object_ids))
            blocks.append(embedding(emb.token_table, np.array([T.SEP])))
        if seq.soft_text is not None:
            blocks.append(matmul(seq.soft_text, emb.token_table))
        elif seq.text_ids.size:
            blocks.append(embedding(emb.token_table, seq.text_ids))
        blocks.append(embedding(emb.token_table, np.array([T.SEP])))
    content = concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
    if content.shape[0] != n:
        raise AssertionError("embedding layout out of sync with assembly")
    pos = embedding(emb.position_table, seq.position_ids)
    seg = embedding(emb.segment_table, seq.segment_ids)
    return add(add(content, pos), seg)


# ---------------------------------------------------------------------------
# trajectory ingestion (JSON-lines plus sidecar manifest declaring d_img)


def manifest_path(data_path) -> Path:
    p = Path(data_path)
    return p.with_suffix(".manifest.json") if p.suffix == ".jsonl" else Path(str(p) + ".manifest.json")


def write_manifest(data_path, d_img: int, count: int, config: dict | None = None) -> Path:
    from . import __version__

    payload = {"tool_version": __version__, "d_img": int(d_img), "count": int(count), "config": config or {}}
    mpath = manifest_path(data_path)
    mpath.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return mpath


def load_trajectories(path, *, with_truth: bool = False):
    """Parse a trajectory JSONL file, validating feature width against the manifest.

    Returns trajectories, or (trajectories, truths) when ``with_truth`` is set;
    the optional per-line "truth" object is ignored by training.
    """
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"missing sidecar manifest {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    d_img = int(manifest["d_img"])
    trajectories = []
    truths = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                traj = Trajectory(
                    episode_id=str(obj["id"]),
                    features=np.asarray(obj["features"], dtype=np.float64),
                    objects=list(obj["objects"]),
                    references=list(obj.get("references", [])),
                )
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trajectory line ({exc})") from exc
            if traj.d_img != d_img:
                raise ValueError(f"{path}:{lineno}: feature width {traj.d_img} != manifest d_img {d_img}")
            trajectories.append(traj)
            truths.append(obj.get("truth"))
    if with_truth:
        return trajectories, truths
    return trajectories
