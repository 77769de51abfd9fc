"""Desk-scale encoder-decoder translation model with exact gradients.

A small post-LN transformer (multi-head attention, position-wise FFN,
sinusoidal positions) implemented in float64 numpy with hand-written
backprop, plus Adam.  It exists to make the two-stage fine-tuning protocol
executable and testable on one workstation core; performance and absolute
translation quality are non-goals.

Also provides the synthetic two-domain task generator: both domains share a
source grammar (templates over a small function-word set), translation is a
token-wise dictionary mapping followed by a deterministic adjacent swap, and
the domains' content lexicons overlap by a controllable fraction.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .corpus import ParallelCorpus
from .errors import TrainerError
from .textprep import BOS_ID, EOS_ID, PAD_ID, SubwordModel, encode

# learning rate used by the large pretrained models this trainer stands in
# for; recorded as a reference, not used by the toy defaults
PMSS_REFERENCE_LR = 5e-5

_NEG = -1e9
_LN_EPS = 1e-5

CHECKPOINT_FORMAT = "itftlab-ckpt-v1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    max_len: int = 200
    vocab_id: str = ""

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise TrainerError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2 != 0:
            raise TrainerError(f"d_model {self.d_model} must be even for sinusoidal positions")
        if self.vocab_size <= 4:
            raise TrainerError(f"vocab_size {self.vocab_size} too small")
        if not (0.0 <= self.dropout < 1.0):
            raise TrainerError(f"dropout {self.dropout} outside [0, 1)")
        if min(self.d_model, self.enc_layers, self.dec_layers, self.ffn_dim, self.max_len) < 1:
            raise TrainerError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "heads": self.heads,
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "ffn_dim": self.ffn_dim,
            "dropout": self.dropout,
            "max_len": self.max_len,
            "vocab_id": self.vocab_id,
        }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    lr: float = 3e-4
    batch_size: int = 10
    seed: int = 222
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainerError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise TrainerError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise TrainerError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }


@dataclass(frozen=True)
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int
    lineage: tuple[dict, ...]

    def lineage_digest(self) -> str:
        payload = json.dumps(list(self.lineage), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def n_parameters(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.params.values())


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) in a fixed order; the order defines both the
    seeded initialization stream and the checkpoint layout."""
    d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("src_emb", (v, d), "embed"),
        ("tgt_emb", (v, d), "embed"),
    ]

    def attention(prefix: str):
        for w in ("wq", "wk", "wv", "wo"):
            specs.append((f"{prefix}.{w}", (d, d), "linear"))
        for b in ("bq", "bk", "bv", "bo"):
            specs.append((f"{prefix}.{b}", (d,), "zeros"))

    def layernorm(prefix: str):
        specs.append((f"{prefix}.g", (d,), "ones"))
        specs.append((f"{prefix}.b", (d,), "zeros"))

    def ffn(prefix: str):
        specs.append((f"{prefix}.w1", (d, f), "linear"))
        specs.append((f"{prefix}.b1", (f,), "zeros"))
        specs.append((f"{prefix}.w2", (f, d), "linear"))
        specs.append((f"{prefix}.b2", (d,), "zeros"))

    for i in range(cfg.enc_layers):
        attention(f"enc{i}.att")
        layernorm(f"enc{i}.ln1")
        ffn(f"enc{i}.ffn")
        layernorm(f"enc{i}.ln2")
    for i in range(cfg.dec_layers):
        attention(f"dec{i}.self")
        layernorm(f"dec{i}.ln1")
        attention(f"dec{i}.cross")
        layernorm(f"dec{i}.ln2")
        ffn(f"dec{i}.ffn")
        layernorm(f"dec{i}.ln3")
    specs.append(("out_w", (d, v), "out_proj"))
    specs.append(("out_b", (v,), "zeros"))
    return specs


def init_model(cfg: ModelConfig, seed: int) -> ModelCheckpoint:
    """Deterministic scaled-uniform initialization from the seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "linear":
            fan_in, fan_out = shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
        elif kind == "out_proj":
            # small output head keeps the initial softmax near uniform
            a = 0.5 / math.sqrt(shape[0])
            params[name] = rng.uniform(-a, a, size=shape)
        elif kind == "embed":
            a = math.sqrt(3.0 / cfg.d_model)
            params[name] = rng.uniform(-a, a, size=shape)
        elif kind == "zeros":
            params[name] = np.zeros(shape)
        elif kind == "ones":
            params[name] = np.ones(shape)
        else:  # pragma: no cover
            raise TrainerError(f"unknown init kind {kind}")
    return ModelCheckpoint(
        config=cfg,
        params=params,
        step=0,
        lineage=({"stage": "init", "seed": int(seed)},),
    )


@lru_cache(maxsize=8)
def _positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


# ---------------------------------------------------------------------------
# forward / backward building blocks
# ---------------------------------------------------------------------------

def _linear_fwd(x, w, b):
    return x @ w + b


def _linear_bwd(x, w, dy):
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layernorm_bwd(cache, dy):
    xhat, inv, g = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dg, db


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _attention_fwd(params, prefix, xq, xkv, mask, heads):
    """Multi-head attention; mask is additive over the key axis."""
    q = _linear_fwd(xq, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = _linear_fwd(xkv, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = _linear_fwd(xkv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale + mask
    probs = _softmax(scores)
    ctx = _merge_heads(probs @ vh)
    out = _linear_fwd(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    cache = (xq, xkv, qh, kh, vh, probs, ctx, scale)
    return out, cache


def _attention_bwd(params, prefix, cache, dout, grads, heads):
    xq, xkv, qh, kh, vh, probs, ctx, scale = cache
    dctx, dwo, dbo = _linear_bwd(ctx, params[f"{prefix}.wo"], dout)
    grads[f"{prefix}.wo"] += dwo
    grads[f"{prefix}.bo"] += dbo
    dctx_h = _split_heads(dctx, heads)
    dprobs = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dctx_h
    # softmax backward
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dqh = (dscores @ kh) * scale
    dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)
    dv = _merge_heads(dvh)
    dxq, dwq, dbq = _linear_bwd(xq, params[f"{prefix}.wq"], dq)
    dxk, dwk, dbk = _linear_bwd(xkv, params[f"{prefix}.wk"], dk)
    dxv, dwv, dbv = _linear_bwd(xkv, params[f"{prefix}.wv"], dv)
    grads[f"{prefix}.wq"] += dwq
    grads[f"{prefix}.bq"] += dbq
    grads[f"{prefix}.wk"] += dwk
    grads[f"{prefix}.bk"] += dbk
    grads[f"{prefix}.wv"] += dwv
    grads[f"{prefix}.bv"] += dbv
    return dxq, dxk + dxv


def _ffn_fwd(params, prefix, x):
    h_pre = _linear_fwd(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    h = np.maximum(h_pre, 0.0)
    out = _linear_fwd(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return out, (x, h_pre, h)


def _ffn_bwd(params, prefix, cache, dout, grads):
    x, h_pre, h = cache
    dh, dw2, db2 = _linear_bwd(h, params[f"{prefix}.w2"], dout)
    grads[f"{prefix}.w2"] += dw2
    grads[f"{prefix}.b2"] += db2
    dh_pre = dh * (h_pre > 0.0)
    dx, dw1, db1 = _linear_bwd(x, params[f"{prefix}.w1"], dh_pre)
    grads[f"{prefix}.w1"] += dw1
    grads[f"{prefix}.b1"] += db1
    return dx


class _Dropout:
    """Inverted dropout; masks are drawn in forward order and replayed in
    backward order, so gradients match the sampled forward exactly."""

    def __init__(self, p: float, rng: np.random.Generator | None):
        self.p = p
        self.rng = rng
        self.active = p > 0.0 and rng is not None
        self.masks: list[np.ndarray] = []

    def fwd(self, x):
        if not self.active:
            self.masks.append(None)
            return x
        mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self.masks.append(mask)
        return x * mask

    def bwd(self, dy):
        mask = self.masks.pop()
        return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# full model forward / backward
# ---------------------------------------------------------------------------

def _strip_trailing_pad(seq: Sequence[int]) -> list[int]:
    out = list(seq)
    while out and out[-1] == PAD_ID:
        out.pop()
    return out


def _pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), max(width, 1)), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _model_fwd(params, cfg: ModelConfig, src, tgt_in, tgt_out, drop: _Dropout):
    b, s_len = src.shape
    l_len = tgt_in.shape[1]
    d = cfg.d_model
    pe = _positional_encoding(cfg.max_len, d)
    caches: dict = {"drop": drop}

    src_key_mask = np.where(src == PAD_ID, _NEG, 0.0)[:, None, None, :]
    causal = np.triu(np.full((l_len, l_len), _NEG), k=1)[None, None, :, :]
    tgt_key_mask = np.where(tgt_in == PAD_ID, _NEG, 0.0)[:, None, None, :]
    dec_self_mask = causal + tgt_key_mask

    x = params["src_emb"][src] * math.sqrt(d) + pe[:s_len]
    x = drop.fwd(x)
    enc_layers = []
    for i in range(cfg.enc_layers):
        a, att_c = _attention_fwd(params, f"enc{i}.att", x, x, src_key_mask, cfg.heads)
        a = drop.fwd(a)
        x1, ln1_c = _layernorm_fwd(x + a, params[f"enc{i}.ln1.g"], params[f"enc{i}.ln1.b"])
        f, ffn_c = _ffn_fwd(params, f"enc{i}.ffn", x1)
        f = drop.fwd(f)
        x, ln2_c = _layernorm_fwd(x1 + f, params[f"enc{i}.ln2.g"], params[f"enc{i}.ln2.b"])
        enc_layers.append((att_c, ln1_c, ffn_c, ln2_c))
    enc_out = x

    y = params["tgt_emb"][tgt_in] * math.sqrt(d) + pe[:l_len]
    y = drop.fwd(y)
    dec_layers = []
    for i in range(cfg.dec_layers):
        a, self_c = _attention_fwd(params, f"dec{i}.self", y, y, dec_self_mask, cfg.heads)
        a = drop.fwd(a)
        y1, ln1_c = _layernorm_fwd(y + a, params[f"dec{i}.ln1.g"], params[f"dec{i}.ln1.b"])
        c, cross_c = _attention_fwd(params, f"dec{i}.cross", y1, enc_out, src_key_mask, cfg.heads)
        c = drop.fwd(c)
        y2, ln2_c = _layernorm_fwd(y1 + c, params[f"dec{i}.ln2.g"], params[f"dec{i}.ln2.b"])
        f, ffn_c = _ffn_fwd(params, f"dec{i}.ffn", y2)
        f = drop.fwd(f)
        y, ln3_c = _layernorm_fwd(y2 + f, params[f"dec{i}.ln3.g"], params[f"dec{i}.ln3.b"])
        dec_layers.append((self_c, ln1_c, cross_c, ln2_c, ffn_c, ln3_c))

    logits = _linear_fwd(y, params["out_w"], params["out_b"])

    # mean cross-entropy over non-PAD target positions, natural log
    loss_mask = tgt_out != PAD_ID
    n_tok = int(loss_mask.sum())
    if n_tok == 0:
        raise TrainerError("batch has no non-PAD target tokens")
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, tgt_out[:, :, None], axis=2)[:, :, 0]
    loss = -float((picked * loss_mask).sum()) / n_tok

    caches.update(
        src=src,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        enc_layers=enc_layers,
        dec_layers=dec_layers,
        enc_out=enc_out,
        dec_out=y,
        logits=logits,
        logp=logp,
        loss_mask=loss_mask,
        n_tok=n_tok,
    )
    return loss, logits, caches


def _model_bwd(params, cfg: ModelConfig, caches) -> dict[str, np.ndarray]:
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    drop: _Dropout = caches["drop"]
    d = cfg.d_model

    probs = np.exp(caches["logp"])
    onehot_grad = probs.copy()
    b, l_len, v = probs.shape
    np.subtract.at(
        onehot_grad.reshape(-1, v),
        (np.arange(b * l_len), caches["tgt_out"].reshape(-1)),
        1.0,
    )
    dlogits = onehot_grad * caches["loss_mask"][:, :, None] / caches["n_tok"]

    dy, dw, db = _linear_bwd(caches["dec_out"], params["out_w"], dlogits)
    grads["out_w"] += dw
    grads["out_b"] += db

    denc_out = np.zeros_like(caches["enc_out"])
    for i in reversed(range(cfg.dec_layers)):
        self_c, ln1_c, cross_c, ln2_c, ffn_c, ln3_c = caches["dec_layers"][i]
        dy2_plus_f, dg, dbn = _layernorm_bwd(ln3_c, dy)
        grads[f"dec{i}.ln3.g"] += dg
        grads[f"dec{i}.ln3.b"] += dbn
        df = drop.bwd(dy2_plus_f)
        dy2 = dy2_plus_f + _ffn_bwd(params, f"dec{i}.ffn", ffn_c, df, grads)
        dy1_plus_c, dg, dbn = _layernorm_bwd(ln2_c, dy2)
        grads[f"dec{i}.ln2.g"] += dg
        grads[f"dec{i}.ln2.b"] += dbn
        dc = drop.bwd(dy1_plus_c)
        dy1_att, denc = _attention_bwd(params, f"dec{i}.cross", cross_c, dc, grads, cfg.heads)
        denc_out += denc
        dy1 = dy1_plus_c + dy1_att
        dy_plus_a, dg, dbn = _layernorm_bwd(ln1_c, dy1)
        grads[f"dec{i}.ln1.g"] += dg
        grads[f"dec{i}.ln1.b"] += dbn
        da = drop.bwd(dy_plus_a)
        dq, dkv = _attention_bwd(params, f"dec{i}.self", self_c, da, grads, cfg.heads)
        dy = dy_plus_a + dq + dkv

    dy = drop.bwd(dy)
    np.add.at(grads["tgt_emb"], caches["tgt_in"], dy * math.sqrt(d))

    dx = denc_out
    for i in reversed(range(cfg.enc_layers)):
        att_c, ln1_c, ffn_c, ln2_c = caches["enc_layers"][i]
        dx1_plus_f, dg, dbn = _layernorm_bwd(ln2_c, dx)
        grads[f"enc{i}.ln2.g"] += dg
        grads[f"enc{i}.ln2.b"] += dbn
        df = drop.bwd(dx1_plus_f)
        dx1 = dx1_plus_f + _ffn_bwd(params, f"enc{i}.ffn", ffn_c, df, grads)
        dx_plus_a, dg, dbn = _layernorm_bwd(ln1_c, dx1)
        grads[f"enc{i}.ln1.g"] += dg
        grads[f"enc{i}.ln1.b"] += dbn
        da = drop.bwd(dx_plus_a)
        dq, dkv = _attention_bwd(params, f"enc{i}.att", att_c, da, grads, cfg.heads)
        dx = dx_plus_a + dq + dkv

    dx = drop.bwd(dx)
    np.add.at(grads["src_emb"], caches["src"], dx * math.sqrt(d))
    return grads


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _check_ids(cfg: ModelConfig, seqs: Sequence[Sequence[int]], what: str, extra: int = 0):
    for i, seq in enumerate(seqs):
        if len(seq) + extra > cfg.max_len:
            raise TrainerError(
                f"{what} sequence {i} has length {len(seq) + extra} > max_len {cfg.max_len}"
            )
        for t in seq:
            if not (0 <= t < cfg.vocab_size):
                raise TrainerError(f"{what} sequence {i}: id {t} outside vocab")


def forward(
    checkpoint: ModelCheckpoint,
    src_batch: Sequence[Sequence[int]],
    tgt_batch: Sequence[Sequence[int]],
) -> tuple[np.ndarray, float]:
    """Teacher-forced forward pass without dropout.

    The decoder consumes BOS + target and predicts target + EOS, so the
    returned logits have shape (batch, tgt_len + 1, vocab).  The loss is the
    mean token cross-entropy (natural log) over non-PAD positions.
    """
    cfg = checkpoint.config
    if len(src_batch) != len(tgt_batch) or not src_batch:
        raise TrainerError("source/target batch size mismatch or empty batch")
    # trailing PAD on a target is padding, not content; EOS goes before it
    tgt_batch = [_strip_trailing_pad(t) for t in tgt_batch]
    _check_ids(cfg, src_batch, "source")
    _check_ids(cfg, tgt_batch, "target", extra=1)
    src = _pad_batch(src_batch)
    tgt_in = _pad_batch([[BOS_ID] + list(t) for t in tgt_batch])
    tgt_out = _pad_batch([list(t) + [EOS_ID] for t in tgt_batch])
    loss, logits, _ = _model_fwd(
        checkpoint.params, cfg, src, tgt_in, tgt_out, _Dropout(0.0, None)
    )
    return logits, loss


PairEncoder = Callable[[str, str], list[tuple[list[int], list[int]]]]


def make_text_encoder(spm: SubwordModel, *, add_eos: bool = True) -> PairEncoder:
    """Single-direction encoder: source ids (+EOS) -> target ids."""

    def enc(src_text: str, tgt_text: str):
        src = encode(spm, src_text) + ([EOS_ID] if add_eos else [])
        tgt = encode(spm, tgt_text)
        return [(src, tgt)]

    return enc


def fine_tune(
    checkpoint: ModelCheckpoint,
    corpus: ParallelCorpus,
    cfg: TrainConfig,
    encoder: PairEncoder,
    *,
    stage: str = "fine-tune",
) -> ModelCheckpoint:
    """One fine-tuning stage: Adam, dropout active, deterministic per seed.

    The input checkpoint is unmodified; the result carries an appended
    lineage entry.  ``encoder`` maps a text pair to one or more (src ids,
    tgt ids) training examples.
    """
    mcfg = checkpoint.config
    examples: list[tuple[list[int], list[int]]] = []
    for idx, (src_text, tgt_text) in enumerate(corpus.pairs):
        for src_ids, tgt_ids in encoder(src_text, tgt_text):
            if len(src_ids) > mcfg.max_len or len(tgt_ids) + 1 > mcfg.max_len:
                raise TrainerError(
                    f"pair {idx} of corpus {corpus.id!r} exceeds max_len {mcfg.max_len}"
                )
            for t in src_ids + tgt_ids:
                if not (0 <= t < mcfg.vocab_size):
                    raise TrainerError(f"pair {idx}: id {t} outside vocab {mcfg.vocab_size}")
            examples.append((list(src_ids), list(tgt_ids)))
    if not examples:
        raise TrainerError(f"corpus {corpus.id!r} produced no training examples")

    params = {name: p.copy() for name, p in checkpoint.params.items()}
    adam_m = {name: np.zeros_like(p) for name, p in params.items()}
    adam_v = {name: np.zeros_like(p) for name, p in params.items()}

    seed_seq = np.random.SeedSequence(cfg.seed)
    data_seed, drop_seed = seed_seq.spawn(2)
    data_rng = np.random.default_rng(data_seed)
    drop_rng = np.random.default_rng(drop_seed)

    t = 0
    for _epoch in range(cfg.epochs):
        order = data_rng.permutation(len(examples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            src = _pad_batch([s for s, _ in batch])
            tgt_in = _pad_batch([[BOS_ID] + t_ for _, t_ in batch])
            tgt_out = _pad_batch([t_ + [EOS_ID] for _, t_ in batch])
            drop = _Dropout(mcfg.dropout, drop_rng)
            _loss, _logits, caches = _model_fwd(params, mcfg, src, tgt_in, tgt_out, drop)
            grads = _model_bwd(params, mcfg, caches)
            t += 1
            b1t = cfg.beta1**t
            b2t = cfg.beta2**t
            for name, p in params.items():
                _kernels.adam_step(
                    p.reshape(-1),
                    np.ascontiguousarray(grads[name]).reshape(-1),
                    adam_m[name].reshape(-1),
                    adam_v[name].reshape(-1),
                    cfg.lr,
                    cfg.beta1,
                    cfg.beta2,
                    cfg.eps,
                    b1t,
                    b2t,
                )

    entry = {
        "stage": stage,
        "corpus_id": corpus.id,
        "size": len(corpus.pairs),
        "epochs": cfg.epochs,
        "seed": cfg.seed,
    }
    return ModelCheckpoint(
        config=mcfg,
        params=params,
        step=checkpoint.step + t,
        lineage=checkpoint.lineage + (entry,),
    )


def greedy_decode(
    checkpoint: ModelCheckpoint,
    src_ids: Sequence[int],
    max_out_len: int,
) -> list[int]:
    """Argmax decoding from BOS until EOS or the length cap; deterministic."""
    out = greedy_decode_batch(checkpoint, [src_ids], max_out_len)
    return out[0]


def greedy_decode_batch(
    checkpoint: ModelCheckpoint,
    src_batch: Sequence[Sequence[int]],
    max_out_len: int,
) -> list[list[int]]:
    cfg = checkpoint.config
    _check_ids(cfg, src_batch, "source")
    if max_out_len <= 0:
        return [[] for _ in src_batch]
    max_out_len = min(max_out_len, cfg.max_len - 1)
    params = checkpoint.params
    src = _pad_batch(src_batch)
    b = src.shape[0]
    generated = np.full((b, 1), BOS_ID, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    drop = _Dropout(0.0, None)
    for _ in range(max_out_len):
        # full re-forward each step; fine at desk scale
        _loss, logits, _ = _model_fwd(
            params, cfg, src, generated,
            np.full((b, generated.shape[1]), EOS_ID, dtype=np.int64), drop,
        )
        nxt = logits[:, -1, :].argmax(axis=1)
        nxt = np.where(finished, PAD_ID, nxt)
        generated = np.concatenate([generated, nxt[:, None]], axis=1)
        finished |= nxt == EOS_ID
        if finished.all():
            break
    results = []
    for row in generated[:, 1:]:
        ids = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            ids.append(int(t))
        results.append(ids)
    return results


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------

def save_checkpoint(checkpoint: ModelCheckpoint, path: str | Path) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": checkpoint.config.to_dict(),
        "step": checkpoint.step,
        "lineage": list(checkpoint.lineage),
        "param_names": list(checkpoint.params),
    }
    meta_arr = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=meta_arr, **checkpoint.params)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise TrainerError(f"unsupported checkpoint format in {path}")
        params = {
            name: np.ascontiguousarray(data[name], dtype=np.float64)
            for name in meta["param_names"]
        }
    return ModelCheckpoint(
        config=ModelConfig(**meta["config"]),
        params=params,
        step=int(meta["step"]),
        lineage=tuple(meta["lineage"]),
    )


# ---------------------------------------------------------------------------
# synthetic two-domain task generator
# ---------------------------------------------------------------------------

FUNCTION_WORDS_SRC = ("fa", "fe", "fi", "fo", "fu", "fy")
FUNCTION_WORDS_TGT = ("za", "ze", "zi", "zo", "zu", "zy")


def _content_word(index: int, prefix: str) -> str:
    letters = []
    n = index
    for _ in range(3):
        letters.append(chr(ord("a") + n % 26))
        n //= 26
    return prefix + "".join(reversed(letters))


def _make_templates(grammar_size: int, rng: np.random.Generator) -> list[list]:
    templates = []
    for _ in range(grammar_size):
        length = int(rng.integers(5, 11))
        slots = []
        for _ in range(length):
            if rng.random() < 0.2:
                slots.append(("F", int(rng.integers(len(FUNCTION_WORDS_SRC)))))
            else:
                slots.append(("C", None))
        # keep templates learnable: at least two content slots each
        n_content = sum(1 for kind, _ in slots if kind == "C")
        for i in range(len(slots)):
            if n_content >= 2:
                break
            if slots[i][0] == "F":
                slots[i] = ("C", None)
                n_content += 1
        templates.append(slots)
    return templates


def _translate_tokens(tokens: list[str]) -> list[str]:
    mapped = []
    for tok in tokens:
        if tok in FUNCTION_WORDS_SRC:
            mapped.append(FUNCTION_WORDS_TGT[FUNCTION_WORDS_SRC.index(tok)])
        else:
            mapped.append("v" + tok[1:])
    # deterministic local reordering: swap adjacent pairs
    for i in range(0, len(mapped) - 1, 2):
        mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
    return mapped


def _gen_domain(
    name: str,
    window_start: int,
    lexicon_size: int,
    templates: list,
    n_pairs: int,
    rng: np.random.Generator,
) -> ParallelCorpus:
    pairs = []
    for _ in range(n_pairs):
        slots = templates[int(rng.integers(len(templates)))]
        src_tokens = []
        for kind, arg in slots:
            if kind == "F":
                src_tokens.append(FUNCTION_WORDS_SRC[arg])
            else:
                idx = window_start + int(rng.integers(lexicon_size))
                src_tokens.append(_content_word(idx, "k"))
        tgt_tokens = _translate_tokens(src_tokens)
        pairs.append((" ".join(src_tokens), " ".join(tgt_tokens)))
    return ParallelCorpus(
        id=name,
        source_lang="xx",
        target_lang="yy",
        domain=name,
        pairs=tuple(pairs),
        provenance=f"synthetic window={window_start} lexicon={lexicon_size} n={n_pairs}",
    )


def synthetic_domain_family(
    window_starts: Sequence[int],
    *,
    grammar_size: int = 40,
    lexicon_size: int = 60,
    n_pairs: int = 512,
    seed: int = 222,
    grammar_seed: int | None = None,
    names: Sequence[str] | None = None,
) -> list[ParallelCorpus]:
    """Domains carved from one content-lexicon index line, sharing a grammar.

    Two windows ``w1 < w2`` overlap in ``max(0, lexicon_size - (w2 - w1))``
    content words, so lexical divergence grows with window distance.
    ``grammar_seed`` lets train and test corpora of the same domain share
    templates while drawing different sentences.
    """
    if min(grammar_size, lexicon_size, n_pairs) < 1:
        raise TrainerError("generator parameters must be positive")
    grammar_rng = np.random.default_rng(
        seed if grammar_seed is None else grammar_seed
    )
    templates = _make_templates(grammar_size, grammar_rng)
    names = list(names) if names else [f"dom{i}" for i in range(len(window_starts))]
    if len(names) != len(window_starts):
        raise TrainerError("names/window_starts length mismatch")
    corpora = []
    for i, (name, start) in enumerate(zip(names, window_starts)):
        # seeded per list position: same-window domains still draw
        # different sentences
        rng = np.random.default_rng([seed, i])
        corpora.append(_gen_domain(name, int(start), lexicon_size, templates, n_pairs, rng))
    return corpora


def gen_synthetic_domains(
    overlap: float,
    grammar_size: int,
    lexicon_size: int,
    n_pairs: int,
    seed: int,
) -> tuple[ParallelCorpus, ParallelCorpus]:
    """Two synthetic domains whose content lexicons overlap in exactly
    floor(overlap * lexicon_size) entries."""
    if not (0.0 <= overlap <= 1.0):
        raise TrainerError(f"overlap {overlap} outside [0, 1]")
    shared = math.floor(overlap * lexicon_size)
    a, b = synthetic_domain_family(
        [0, lexicon_size - shared],
        grammar_size=grammar_size,
        lexicon_size=lexicon_size,
        n_pairs=n_pairs,
        seed=seed,
        names=["domA", "domB"],
    )
    return a, b
