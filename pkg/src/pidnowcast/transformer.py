"""Causal transformer over flattened space-time token streams.

Streams are frame-major and row-major within a frame. The model is a
pre-LayerNorm decoder-only stack with a learned absolute positional
embedding over the whole stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import autograd as ag
from .tensor.autograd import ShapeError, Tensor
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .tensor.nn import Embedding, LayerNorm, Linear, Module
from .tensor.optim import Adam

MASK_VALUE = -1e9


class ContextError(ValueError):
    pass


@dataclass
class TransformerConfig:
    vocab: int = 512
    context_len: int = 576
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    dropout: float = 0.1
    mlp_ratio: int = 4
    lr: float = 1e-3
    batch_size: int = 4
    frame_tokens: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.vocab < 2 or self.context_len < 1 or self.layers < 1:
            raise ValueError("vocab >= 2, context_len >= 1 and layers >= 1 required")
        if self.frame_tokens and self.context_len < 2 * self.frame_tokens:
            raise ValueError("context_len must hold at least two frames of tokens")

    def to_dict(self):
        return asdict(self)


@dataclass
class TokenStream:
    tokens: np.ndarray
    frame_tokens: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)

    @classmethod
    def from_grids(cls, grids):
        grids = np.asarray(grids)
        return cls(grids.reshape(-1), grids.shape[1] * grids.shape[2])

    @property
    def frame_boundaries(self):
        return list(range(0, len(self.tokens), self.frame_tokens))

    def grids(self, h, w):
        return self.tokens.reshape(-1, h, w)


def causal_mask(n):
    return np.triu(np.full((n, n), MASK_VALUE, dtype=np.float32), k=1)


class Block(Module):
    def __init__(self, cfg: TransformerConfig, rng):
        d = cfg.model_dim
        self.heads = cfg.heads
        self.p = cfg.dropout
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, rng)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, rng)

    def attention(self, x, rng):
        b, n, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, hd)
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, n, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        att = ag.softmax(scores + causal_mask(n), axis=-1)
        att = ag.dropout(att, self.p, rng, self.training)
        out = ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)).reshape(b, n, d)
        return ag.dropout(self.proj(out), self.p, rng, self.training)

    def forward(self, x, rng=None):
        x = x + self.attention(self.ln1(x), rng)
        h = self.fc2(ag.relu(self.fc1(self.ln2(x))))
        return x + ag.dropout(h, self.p, rng, self.training)


class TokenTransformer(Module):
    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.tok = Embedding(cfg.vocab, cfg.model_dim, rng)
        self.pos = Embedding(cfg.context_len, cfg.model_dim, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.model_dim)
        self.head = Linear(cfg.model_dim, cfg.vocab, rng)

    def embed(self, tokens):
        return self.tok(tokens) + self.pos(np.arange(tokens.shape[1]))

    def forward_embedded(self, h, rng=None):
        for blk in self.blocks:
            h = blk(h, rng)
        return self.head(self.ln_f(h))


def _as_batch(tokens):
    t = np.asarray(tokens.tokens if isinstance(tokens, TokenStream) else tokens, dtype=np.int64)
    return (t[None], True) if t.ndim == 1 else (t, False)


def forward_logits(model: TokenTransformer, tokens, rng=None):
    """Logits (L, vocab) for a stream, or (B, L, vocab) for a batch of streams."""
    t, single = _as_batch(tokens)
    if t.shape[1] == 0:
        raise ShapeError("forward_logits: empty stream")
    if t.shape[1] > model.cfg.context_len:
        raise ContextError(f"stream length {t.shape[1]} exceeds context_len {model.cfg.context_len}")
    if t.min() < 0 or t.max() >= model.cfg.vocab:
        raise IndexError(f"token outside [0, {model.cfg.vocab})")
    logits = model.forward_embedded(model.embed(t), rng)
    return logits[0] if single else logits


def transformer_loss(model: TokenTransformer, tokens, rng=None):
    """Mean next-token cross-entropy: logits at 0..L-2 against tokens 1..L-1."""
    t, _ = _as_batch(tokens)
    if t.shape[1] < 2:
        raise ShapeError("transformer_loss needs a stream of length >= 2")
    logits = forward_logits(model, t, rng)
    return ag.cross_entropy(logits[:, :-1], t[:, 1:])


def _sample_row(logits, temperature, top_k, rng):
    if temperature <= 0.0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / temperature
    if top_k and top_k < z.size:
        cut = np.partition(z, -top_k)[-top_k]
        z = np.where(z >= cut, z, -np.inf)
    p = np.exp(z - z.max())
    cdf = np.cumsum(p / p.sum())
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), z.size - 1))


def _ln(x, ln):
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + 1e-5)).astype(x.dtype) * ln.weight.data + ln.bias.data


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _KvDecoder:
    """Inference-only forward pass that caches keys and values, one new chunk at a time."""

    def __init__(self, model: TokenTransformer, batch: int, length: int):
        cfg = model.cfg
        self.model = model
        self.hd = cfg.model_dim // cfg.heads
        shape = (batch, cfg.heads, length, self.hd)
        dt = model.tok.weight.data.dtype
        self.k = [np.zeros(shape, dt) for _ in model.blocks]
        self.v = [np.zeros(shape, dt) for _ in model.blocks]
        self.pos = 0

    def feed(self, tokens):
        """Append tokens (B, n); return logits (B, vocab) at the last new position."""
        m = self.model
        b, n = tokens.shape
        start, end = self.pos, self.pos + n
        x = m.tok.weight.data[tokens] + m.pos.weight.data[np.arange(start, end)]
        mask = causal_mask(end)[start:end]
        for blk, kc, vc in zip(m.blocks, self.k, self.v):
            qkv = _ln(x, blk.ln1) @ blk.qkv.weight.data + blk.qkv.bias.data
            qkv = qkv.reshape(b, n, 3, blk.heads, self.hd).transpose(2, 0, 3, 1, 4)
            kc[:, :, start:end], vc[:, :, start:end] = qkv[1], qkv[2]
            scores = qkv[0] @ kc[:, :, :end].transpose(0, 1, 3, 2) * (1.0 / math.sqrt(self.hd))
            att = _softmax(scores + mask) @ vc[:, :, :end]
            x = x + att.transpose(0, 2, 1, 3).reshape(b, n, -1) @ blk.proj.weight.data + blk.proj.bias.data
            h = np.maximum(_ln(x, blk.ln2) @ blk.fc1.weight.data + blk.fc1.bias.data, 0.0)
            x = x + h @ blk.fc2.weight.data + blk.fc2.bias.data
        self.pos = end
        return _ln(x[:, -1], m.ln_f) @ m.head.weight.data + m.head.bias.data


def sample_rollout(model: TokenTransformer, cond, m_pred: int, temperature: float = 1.0,
                   top_k: int = 64, seed=0):
    """Autoregressively sample ``m_pred`` frames of tokens after ``cond``.

    ``cond`` is (N, h, w) or a batch (B, N, h, w); ``seed`` is an int or one
    seed per batch member. Temperature 0 gives the greedy rollout. Returns
    (M, h, w) or (B, M, h, w). Keys and values are cached, so each sampled
    token costs one position's worth of computation.
    """
    cond = np.asarray(cond, dtype=np.int64)
    single = cond.ndim == 3
    if single:
        cond = cond[None]
    b, n, h, w = cond.shape
    if n * h * w == 0:
        raise ShapeError("sample_rollout needs at least one conditioning token")
    seeds = [seed] * b if np.isscalar(seed) else list(seed)
    if len(seeds) != b:
        raise ValueError("need one seed per batch member")
    rngs = [np.random.default_rng(s) for s in seeds]
    total = (n + m_pred) * h * w
    if total > model.cfg.context_len:
        raise ContextError(f"rollout of {total} tokens exceeds context_len {model.cfg.context_len}")
    prefix = cond.reshape(b, -1)
    if prefix.size and (prefix.min() < 0 or prefix.max() >= model.cfg.vocab):
        raise IndexError(f"token outside [0, {model.cfg.vocab})")
    out = np.zeros((b, m_pred * h * w), dtype=np.int64)
    dec = _KvDecoder(model, b, total)
    logits = dec.feed(prefix)
    for j in range(out.shape[1]):
        for i in range(b):
            out[i, j] = _sample_row(logits[i], temperature, top_k, rngs[i])
        if j + 1 < out.shape[1]:
            logits = dec.feed(out[:, j:j + 1])
    out = out.reshape(b, m_pred, h, w)
    return out[0] if single else out


def train_transformer(streams, cfg: TransformerConfig, steps: int, seed: int = 0, model=None,
                      log_csv=None):
    """Teacher-forced next-token training on (S, L) token streams; returns (model, losses)."""
    streams = np.asarray(streams, dtype=np.int64)
    if streams.ndim == 1:
        streams = streams[None]
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng(rng.integers(2 ** 63))
    model = model if model is not None else TokenTransformer(cfg, seed)
    model.train()
    opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=1.0)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(streams), size=min(cfg.batch_size, len(streams)), replace=False)
        loss = transformer_loss(model, streams[np.sort(idx)], drop_rng)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite transformer loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    if log_csv is not None:
        with open(log_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "loss"])
            wr.writerows(enumerate(losses))
    return model, losses


def save_transformer(path, model: TokenTransformer, extra=None):
    meta = {"kind": "transformer", "config": model.cfg.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_transformer(path) -> TokenTransformer:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "transformer":
        raise ValueError(f"{path} is not a transformer checkpoint")
    model = TokenTransformer(TransformerConfig(**meta["config"]))
    model.load_state_dict(params)
    return model
