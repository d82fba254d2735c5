"""Causal transformer caption decoder with cross-attention over filtered tokens."""

from __future__ import annotations

import math

import numpy as np

from mvcc import nn
from mvcc.encoder import ModelConfig
from mvcc.errors import ContractError, DegenerateMemoryError, VocabularyError
from mvcc.numerics import Tensor, add, cross_entropy, embedding, getitem, linear, parameter

PAD, BOS, EOS, UNK = 0, 1, 2, 3


def init_decoder(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = cfg.dec_width
    w: dict[str, np.ndarray] = {
        "embed.tok": nn.normal(rng, (cfg.vocab_size, d), 0.1),
        "embed.pos": nn.normal(rng, (cfg.max_len, d), 0.1),
    }
    out_scale = 1.0 / math.sqrt(3 * max(cfg.dec_layers, 1))
    for i in range(cfg.dec_layers):
        p = f"decoder.layers.{i}"
        nn.init_norm(w, f"{p}.ln1", d)
        nn.init_attention(rng, w, f"{p}.self", d, out_scale)
        nn.init_norm(w, f"{p}.ln2", d)
        nn.init_attention(rng, w, f"{p}.cross", d, out_scale)
        nn.init_norm(w, f"{p}.ln3", d)
        nn.init_mlp(rng, w, f"{p}.mlp", d, cfg.mlp_ratio * d, out_scale)
    nn.init_norm(w, "decoder.ln_f", d)
    w["head.W"] = nn.normal(rng, (d, cfg.vocab_size), 1.0 / math.sqrt(d))
    w["head.b"] = np.zeros(cfg.vocab_size)
    return {k: parameter(v) for k, v in w.items()}


def causal_mask(t: int) -> np.ndarray:
    """Position i may attend to positions j <= i."""
    return np.tril(np.ones((t, t), dtype=bool))


def embed(ids, weights: dict) -> Tensor:
    """Token embedding plus learned position embedding, (B, T) -> (B, T, d)."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim == 1:
        ids = ids[None]
    tok, pos = weights["embed.tok"], weights["embed.pos"]
    if ids.size and (ids.min() < 0 or ids.max() >= tok.shape[0]):
        bad = ids[(ids < 0) | (ids >= tok.shape[0])][0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {tok.shape[0]}")
    if ids.shape[1] > pos.shape[0]:
        raise ContractError(f"sequence length {ids.shape[1]} exceeds max_len {pos.shape[0]}")
    return add(embedding(tok, ids), getitem(pos, slice(0, ids.shape[1])))


def decode_forward(x: Tensor, memory: Tensor, weights: dict, cfg: ModelConfig, key_valid=None) -> Tensor:
    """Pre-norm decoder stack; returns (B, T, K) logits."""
    if memory.shape[1] == 0:
        raise DegenerateMemoryError("decoder memory is empty")
    if memory.shape[-1] != x.shape[-1]:
        raise ContractError(f"memory width {memory.shape[-1]} != decoder width {x.shape[-1]}")
    self_mask = causal_mask(x.shape[1])
    cross_mask = None if key_valid is None else np.asarray(key_valid, dtype=bool)[:, None, None, :]
    for i in range(cfg.dec_layers):
        p = f"decoder.layers.{i}"
        h = nn.norm(x, weights, f"{p}.ln1", cfg.ln_eps)
        x = add(x, nn.multi_head_attention(h, h, weights, f"{p}.self", cfg.heads, self_mask))
        h = nn.norm(x, weights, f"{p}.ln2", cfg.ln_eps)
        x = add(x, nn.multi_head_attention(h, memory, weights, f"{p}.cross", cfg.heads, cross_mask))
        h = nn.norm(x, weights, f"{p}.ln3", cfg.ln_eps)
        x = add(x, nn.feed_forward(h, weights, f"{p}.mlp"))
    x = nn.norm(x, weights, "decoder.ln_f", cfg.ln_eps)
    return linear(x, weights["head.W"], weights["head.b"])


def teacher_forcing_split(reference) -> tuple[np.ndarray, np.ndarray]:
    """Inputs are all but the last token; targets are shifted left by one."""
    ref = np.asarray(reference, dtype=np.intp)
    if ref.ndim == 1:
        ref = ref[None]
    return ref[:, :-1], ref[:, 1:]


def caption_loss(logits: Tensor, targets) -> Tensor:
    """Mean token cross-entropy over non-PAD target positions."""
    targets = np.asarray(targets, dtype=np.intp)
    if targets.ndim == 1:
        targets = targets[None]
    if not (targets != PAD).any():
        raise ContractError("reference contains only padding")
    return cross_entropy(logits, targets, ignore_index=PAD)


def greedy_decode(memory: Tensor, weights: dict, cfg: ModelConfig, key_valid=None, max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens (BOS included).

    Returns the caption ids without BOS/EOS. Ties go to the smallest id.
    """
    max_len = cfg.max_len if max_len is None else min(max_len, cfg.max_len)
    b = memory.shape[0]
    seq = np.full((b, 1), BOS, dtype=np.intp)
    done = np.zeros(b, dtype=bool)
    while seq.shape[1] < max_len and not done.all():
        logits = decode_forward(embed(seq, weights), memory, weights, cfg, key_valid)
        nxt = np.argmax(logits.data[:, -1, :], axis=-1)
        nxt = np.where(done, PAD, nxt)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
        done |= nxt == EOS
    out = []
    for row in seq[:, 1:]:
        ids = []
        for t in row:
            if t in (EOS, PAD):
                break
            ids.append(int(t))
        out.append(ids)
    return out
