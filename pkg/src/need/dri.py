"""Debunking relationship inference: does a debunking video refute a candidate?

The model has three parts.

Text
    The pair is packed as ``[CLS] debunking [SEP] candidate [SEP]``. Token,
    segment-type and learned position embeddings are summed and run through
    pre-norm transformer blocks; the final CLS state is the text feature.
Visual
    Each stream's frames are projected, a stream-specific CLS vector is
    prepended and fixed sinusoidal position codes are added. Every layer
    applies self-attention within each stream, then cross-attention whose
    queries come from one stream and keys/values from the other. Layer
    weights are shared by both streams. The visual feature is the
    concatenation of the two final CLS states.
Fusion
    Both features are projected to a common width, treated as a two-token
    sequence for one multi-head self-attention layer with a residual, mean
    pooled and classified into two logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from need import checkpoint
from need import tensor as T
from need.corpus import CLS, PAD, SEP, Event, VideoRecord
from need.errors import ConfigError, ContractError, EmptyStreamError
from need.nn import EncoderBlock, LayerNorm, Linear, Module, MultiHeadAttention, normal
from need.optim import Adam
from need.tensor import Tensor

MAX_FRAMES = 32


# -- pairs ------------------------------------------------------------------------
@dataclass(frozen=True)
class DriPair:
    debunking: VideoRecord
    candidate: VideoRecord
    label: int

    def __post_init__(self):
        if self.debunking.event_id != self.candidate.event_id:
            raise ContractError("pair videos belong to different events")
        if self.debunking.role != "debunking" or not self.candidate.is_target:
            raise ContractError("a pair needs a debunking video and a fake or real candidate")


def build_dri_pairs(events: Sequence[Event]) -> list:
    """Every debunking x fake pair (label 1) and debunking x real pair (label 0)."""
    pairs = []
    for e in events:
        for d in e.by_role("debunking"):
            for c in e.targets:
                pairs.append(DriPair(d, c, int(c.role == "fake")))
    return pairs


@dataclass(frozen=True)
class TextPair:
    tokens: tuple
    type_ids: tuple

    def __len__(self):
        return len(self.tokens)


def pack_text_pair(s_d: Sequence[int], s_c: Sequence[int], max_len: int = 256) -> TextPair:
    """``[CLS] s_d [SEP] s_c [SEP]`` cut to ``max_len`` tokens.

    Tokens are dropped from the tail of the longer segment; segments of equal
    length shrink together so neither is favoured.
    """
    if max_len < 5:
        raise ConfigError(f"max_len must be at least 5, got {max_len}")
    a, b = list(s_d), list(s_c)
    budget = max_len - 3
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        elif len(b) > len(a):
            b.pop()
        else:
            a.pop()
            b.pop()
    tokens = [CLS, *a, SEP, *b, SEP]
    type_ids = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return TextPair(tuple(int(t) for t in tokens), tuple(type_ids))


def positional_codes(n: int, d: int) -> np.ndarray:
    """Sinusoidal codes: sin(pos / 10000^(2i/d)) at 2i, cos at 2i + 1."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def cap_frames(frames: np.ndarray, cap: int = MAX_FRAMES) -> np.ndarray:
    """Uniformly subsample to at most ``cap`` frames, keeping first and last."""
    n = frames.shape[0]
    if n <= cap:
        return frames
    idx = np.round(np.linspace(0, n - 1, cap)).astype(int)
    return frames[idx]


# -- model ------------------------------------------------------------------------
@dataclass(frozen=True)
class DriConfig:
    vocab_size: int = 1000
    max_text_len: int = 256
    d_frame: int = 64
    d_text: int = 64
    text_layers: int = 2
    text_heads: int = 4
    d_visual: int = 64
    visual_layers: int = 2
    visual_heads: int = 4
    d_fusion: int = 64
    fusion_heads: int = 4
    dropout: float = 0.1
    use_text: bool = True
    use_visual: bool = True

    def validate(self):
        if self.max_text_len < 5:
            raise ConfigError("max_text_len must be at least 5")
        for d, h in ((self.d_text, self.text_heads), (self.d_visual, self.visual_heads),
                     (self.d_fusion, self.fusion_heads)):
            if d < 1 or h < 1 or d % h:
                raise ConfigError(f"width {d} is not divisible by {h} heads")
        if self.d_visual % 2:
            raise ConfigError("d_visual must be even for sinusoidal codes")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not (self.use_text or self.use_visual):
            raise ConfigError("at least one modality must be enabled")


class DriModel(Module):
    def __init__(self, config: DriConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config
        self.tok_emb = normal(rng, (c.vocab_size, c.d_text))
        self.type_emb = normal(rng, (2, c.d_text))
        self.pos_emb = normal(rng, (c.max_text_len, c.d_text))
        self.text_blocks = [EncoderBlock(c.d_text, c.text_heads, rng) for _ in range(c.text_layers)]
        self.text_norm = LayerNorm(c.d_text)
        self.frame_proj = Linear(c.d_frame, c.d_visual, rng)
        self.cls_debunking = normal(rng, (c.d_visual,))
        self.cls_candidate = normal(rng, (c.d_visual,))
        self.self_blocks = [EncoderBlock(c.d_visual, c.visual_heads, rng) for _ in range(c.visual_layers)]
        self.cross_blocks = [EncoderBlock(c.d_visual, c.visual_heads, rng) for _ in range(c.visual_layers)]
        self.visual_norm = LayerNorm(c.d_visual)
        self.fuse_text = Linear(c.d_text, c.d_fusion, rng)
        self.fuse_visual = Linear(2 * c.d_visual, c.d_fusion, rng)
        self.fusion = MultiHeadAttention(c.d_fusion, c.fusion_heads, rng)
        self.head = Linear(c.d_fusion, 2, rng)


@dataclass
class _Ctx:
    train: bool = False
    rng: np.random.Generator | None = None

    def drop(self, model: DriModel):
        return {"train": self.train, "rng": self.rng, "dropout": model.config.dropout}


# -- batched encoders ---------------------------------------------------------------
def _pad_text(pairs: Sequence[TextPair]):
    n = max(len(p) for p in pairs)
    tok = np.full((len(pairs), n), PAD, dtype=np.int64)
    typ = np.zeros((len(pairs), n), dtype=np.int64)
    mask = np.zeros((len(pairs), n), dtype=bool)
    for i, p in enumerate(pairs):
        tok[i, :len(p)] = p.tokens
        typ[i, :len(p)] = p.type_ids
        mask[i, :len(p)] = True
    return tok, typ, mask


def text_forward_batch(pairs: Sequence[TextPair], model: DriModel, ctx: _Ctx) -> Tensor:
    tok, typ, mask = _pad_text(pairs)
    if tok.shape[1] > model.config.max_text_len:
        raise ContractError(f"packed length {tok.shape[1]} exceeds max_text_len")
    if tok.max() >= model.config.vocab_size:
        raise ContractError("token id outside the model vocabulary")
    x = (T.embedding(model.tok_emb, tok) + T.embedding(model.type_emb, typ)
         + T.embedding(model.pos_emb, np.arange(tok.shape[1]))[None])
    x = T.dropout(x, model.config.dropout, ctx.train, ctx.rng)
    for block in model.text_blocks:
        x = block(x, key_mask=mask, **ctx.drop(model))
    return model.text_norm(x[:, 0, :])


def text_forward(pair: TextPair, model: DriModel, mode: str = "eval", rng=None) -> Tensor:
    """CLS feature ``x_t`` of one packed pair."""
    return text_forward_batch([pair], model, _Ctx(mode == "train", rng))[0]


def _stream_cls(model: DriModel, stream: str) -> Tensor:
    if stream == "debunking":
        return model.cls_debunking
    if stream == "candidate":
        return model.cls_candidate
    raise ConfigError(f"stream must be 'debunking' or 'candidate', got {stream!r}")


def _encode_frames(frames_list: Sequence[np.ndarray], model: DriModel, stream: str):
    """Batched temporal encoding: returns ``([B, 1 + n_max, d_v] tensor, key mask)``."""
    frames_list = [cap_frames(np.asarray(f, dtype=np.float64)) for f in frames_list]
    for f in frames_list:
        if f.ndim != 2 or f.shape[0] == 0:
            raise EmptyStreamError(f"{stream} stream has no frames")
    n = max(f.shape[0] for f in frames_list)
    batch = np.zeros((len(frames_list), n, model.config.d_frame))
    mask = np.zeros((len(frames_list), n + 1), dtype=bool)
    mask[:, 0] = True
    for i, f in enumerate(frames_list):
        batch[i, :f.shape[0]] = f
        mask[i, 1:f.shape[0] + 1] = True
    h = model.frame_proj(Tensor(batch))
    cls = T.reshape(_stream_cls(model, stream), (1, 1, -1)) * np.ones((len(frames_list), 1, 1))
    h = T.concat([cls, h], axis=1)
    h = h + positional_codes(n + 1, model.config.d_visual)[None]
    return h, mask


def temporal_encode(frames: np.ndarray, model: DriModel, stream: str) -> Tensor:
    """``(n + 1) x d_v`` stream encoding: CLS row followed by projected frames."""
    h, _ = _encode_frames([frames], model, stream)
    return h[0]


def visual_forward_batch(frames_d, frames_c, model: DriModel, ctx: _Ctx) -> Tensor:
    hd, md = _encode_frames(frames_d, model, "debunking")
    hc, mc = _encode_frames(frames_c, model, "candidate")
    kw = ctx.drop(model)
    for self_block, cross_block in zip(model.self_blocks, model.cross_blocks):
        hd = self_block(hd, key_mask=md, **kw)
        hc = self_block(hc, key_mask=mc, **kw)
        # both streams update from the other's pre-cross state
        hd, hc = (cross_block(hd, key_mask=mc, context=hc, **kw),
                  cross_block(hc, key_mask=md, context=hd, **kw))
    return T.concat([model.visual_norm(hd[:, 0, :]), model.visual_norm(hc[:, 0, :])], axis=-1)


def visual_forward(frames_d: np.ndarray, frames_c: np.ndarray, model: DriModel,
                   mode: str = "eval", rng=None) -> Tensor:
    """``x_v = [CLS_debunking, CLS_candidate]`` for one pair of frame streams."""
    return visual_forward_batch([frames_d], [frames_c], model, _Ctx(mode == "train", rng))[0]


def fusion_logits(x_t: Tensor, x_v: Tensor, model: DriModel, ctx: _Ctx | None = None) -> Tensor:
    ctx = ctx or _Ctx()
    c = model.config
    if not c.use_text:
        x_t = Tensor(np.zeros(x_t.shape))
    if not c.use_visual:
        x_v = Tensor(np.zeros(x_v.shape))
    seq = T.stack([model.fuse_text(x_t), model.fuse_visual(x_v)], axis=-2)   # [B, 2, d_f]
    seq = seq + T.dropout(model.fusion(seq), c.dropout, ctx.train, ctx.rng)
    return model.head(T.mean(seq, axis=-2))


def fuse_and_classify(x_t, x_v, model: DriModel, mode: str = "eval", rng=None) -> float:
    """Refutation probability from one text feature and one visual feature."""
    x_t, x_v = T.as_tensor(x_t), T.as_tensor(x_v)
    logits = fusion_logits(T.reshape(x_t, (1, -1)), T.reshape(x_v, (1, -1)), model, _Ctx(mode == "train", rng))
    return float(T.softmax_rows(logits).data[0, 1])


def pair_logits(debunkers: Sequence[VideoRecord], candidates: Sequence[VideoRecord], model: DriModel,
                ctx: _Ctx | None = None) -> Tensor:
    """``[B, 2]`` logits for aligned lists of debunking and candidate videos."""
    ctx = ctx or _Ctx()
    c = model.config
    texts = [pack_text_pair(d.tokens, v.tokens, c.max_text_len) for d, v in zip(debunkers, candidates)]
    x_t = text_forward_batch(texts, model, ctx)
    x_v = visual_forward_batch([d.frame_features for d in debunkers],
                               [v.frame_features for v in candidates], model, ctx)
    return fusion_logits(x_t, x_v, model, ctx)


def score_pairs(debunkers, candidates, model: DriModel, batch_size: int = 64) -> np.ndarray:
    """Eval-mode refutation probabilities for aligned video lists."""
    out = []
    for s in range(0, len(debunkers), batch_size):
        logits = pair_logits(debunkers[s:s + batch_size], candidates[s:s + batch_size], model)
        out.append(T.softmax_rows(logits).data[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def dri_infer(debunking: VideoRecord, candidate: VideoRecord, model: DriModel) -> float:
    return float(score_pairs([debunking], [candidate], model)[0])


# -- training ---------------------------------------------------------------------
@dataclass(frozen=True)
class DriHyper:
    lr: float = 5e-5
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    model: DriConfig = field(default_factory=DriConfig)

    def validate(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid training hyperparameters lr={self.lr} epochs={self.epochs}")
        self.model.validate()


def dri_train(pairs: Sequence[DriPair], hyper: DriHyper | None = None,
              epoch_callback: Callable[[int, DriModel], None] | None = None) -> tuple:
    """Adam on mean BCE over pairs; returns ``(model, per-epoch loss trace)``."""
    hyper = hyper or DriHyper()
    hyper.validate()
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    if labels.size == 0 or labels.min() == labels.max():
        raise ConfigError("DRI training needs both refutation and non-refutation pairs")
    model = DriModel(hyper.model, np.random.default_rng([hyper.seed, 0]))
    rng = np.random.default_rng([hyper.seed, 1])
    opt = Adam(model.parameters(), lr=hyper.lr)
    ctx = _Ctx(True, rng)
    trace = []
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for s in range(0, len(order), hyper.batch_size):
            batch = [pairs[i] for i in order[s:s + hyper.batch_size]]
            logits = pair_logits([p.debunking for p in batch], [p.candidate for p in batch], model, ctx)
            loss = T.binary_cross_entropy_from_logits(logits, [p.label for p in batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return model, trace


def pair_accuracy(model: DriModel, pairs: Sequence[DriPair]) -> float:
    p = score_pairs([q.debunking for q in pairs], [q.candidate for q in pairs], model)
    return float(np.mean((p >= 0.5) == np.array([q.label for q in pairs], dtype=bool)))


# -- checkpoints ------------------------------------------------------------------
def save_dri(path, model: DriModel):
    checkpoint.save(path, "dri", asdict(model.config), model.state_dict())


def load_dri(path) -> DriModel:
    hyper, state = checkpoint.load(path, "dri")
    model = DriModel(DriConfig(**hyper), np.random.default_rng(0))
    model.load_state_dict(state)
    return model
