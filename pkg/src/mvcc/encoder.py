"""Two-frame spatiotemporal encoder, LoRA adapters and the token projector.

The bi-temporal pair is treated as a two-frame clip: both frames are cut into
s x s patches, linearly embedded, tagged with a spatial position and a frame
embedding, and passed jointly through pre-norm transformer blocks so tokens of
one frame attend to tokens of the other.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from mvcc import nn
from mvcc.errors import ConfigError, DimensionError
from mvcc.numerics import Tensor, add, as_tensor, concat, getitem, linear, matmul, parameter

LORA_TARGETS = ("q", "k", "v")
MASK_MODES = ("zero", "drop")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 16
    channels: int = 64
    enc_blocks: int = 2
    heads: int = 4
    dec_layers: int = 2
    dec_width: int = 64
    vocab_size: int = 64
    max_len: int = 24
    lora_rank: int = 4
    lora_alpha: float | None = None
    mask_mode: str = "zero"
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.lora_alpha is None:
            object.__setattr__(self, "lora_alpha", float(self.lora_rank))
        self.validate()

    def validate(self) -> None:
        if self.patch < 1 or self.image_size < 1 or self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch {self.patch}")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.lora_rank > self.channels:
            raise ConfigError(f"lora_rank {self.lora_rank} exceeds channels {self.channels}")
        if self.heads < 1 or self.channels % self.heads or self.dec_width % self.heads:
            raise ConfigError(f"widths {self.channels}/{self.dec_width} not divisible by {self.heads} heads")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.enc_blocks < 0 or self.dec_layers < 0 or self.max_len < 2 or self.vocab_size < 4:
            raise ConfigError("invalid depth, max_len or vocab_size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    alpha: float
    target: str

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @classmethod
    def create(cls, rng: np.random.Generator, width: int, rank: int, alpha: float, target: str):
        if rank > width:
            raise ConfigError(f"LoRA rank {rank} exceeds width {width}")
        A = parameter(nn.normal(rng, (width, rank), 1.0 / math.sqrt(width)))
        return cls(A, parameter(np.zeros((rank, width))), float(alpha), target)


def apply_lora(W, adapter: LoraAdapter) -> Tensor:
    """Return ``W + (alpha / r) * A @ B``; only A and B carry gradients."""
    W = as_tensor(W)
    c = W.shape[0]
    if adapter.rank > c:
        raise ConfigError(f"LoRA rank {adapter.rank} exceeds width {c}")
    if adapter.A.shape[0] != W.shape[0] or adapter.B.shape[1] != W.shape[1]:
        raise DimensionError(f"adapter {adapter.A.shape}x{adapter.B.shape} does not fit weight {W.shape}")
    return add(W, matmul(adapter.A, adapter.B) * (adapter.alpha / adapter.rank))


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c, s = cfg.channels, cfg.patch
    w: dict[str, np.ndarray] = {}
    patch_dim = s * s * 3
    w["encoder.patch.W"] = nn.normal(rng, (patch_dim, c), 1.0 / math.sqrt(patch_dim))
    w["encoder.patch.b"] = np.zeros(c)
    w["encoder.pos"] = nn.normal(rng, (cfg.tokens_per_frame, c), 0.5)
    w["encoder.frame"] = nn.normal(rng, (2, c), 0.5)
    out_scale = 1.0 / math.sqrt(2 * max(cfg.enc_blocks, 1))
    for i in range(cfg.enc_blocks):
        p = f"encoder.blocks.{i}"
        nn.init_norm(w, f"{p}.ln1", c)
        nn.init_attention(rng, w, f"{p}.attn", c, out_scale)
        nn.init_norm(w, f"{p}.ln2", c)
        nn.init_mlp(rng, w, f"{p}.mlp", c, cfg.mlp_ratio * c, out_scale)
    # frozen base: never requires grad
    return {k: Tensor(v) for k, v in w.items()}


def init_adapters(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, LoraAdapter]:
    return {
        t: LoraAdapter.create(rng, cfg.channels, cfg.lora_rank, cfg.lora_alpha, t) for t in LORA_TARGETS
    }


def init_projector(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "projector.W": parameter(nn.normal(rng, (cfg.channels, cfg.dec_width), 1.0 / math.sqrt(cfg.channels))),
        "projector.b": parameter(np.zeros(cfg.dec_width)),
    }


def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    return arr[None] if arr.ndim == 3 else arr


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, h*w, s*s*3), patches in row-major grid order."""
    b, H, W, ch = images.shape
    h, w = H // patch, W // patch
    x = images.reshape(b, h, patch, w, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * w, patch * patch * ch)


def patchify(image_a, image_b, cfg: ModelConfig, weights: dict[str, Tensor]) -> Tensor:
    """Embed both frames into one (B, 2hw, c) token sequence, frame 1 first."""
    a, b = _as_batch(image_a), _as_batch(image_b)
    expected = (cfg.image_size, cfg.image_size, 3)
    if a.shape != b.shape or a.shape[1:] != expected:
        raise ConfigError(f"image shapes {a.shape[1:]} / {b.shape[1:]} do not match config {expected}")
    pos = weights["encoder.pos"]
    frame = weights["encoder.frame"]
    frames = []
    for k, img in enumerate((a, b)):
        tok = linear(Tensor._wrap(extract_patches(img, cfg.patch)), weights["encoder.patch.W"], weights["encoder.patch.b"])
        frames.append(add(add(tok, pos), getitem(frame, slice(k, k + 1))))
    return concat(frames, axis=1)


def encoder_block(x: Tensor, cfg: ModelConfig, weights: dict, i: int, adapters=None) -> Tensor:
    p = f"encoder.blocks.{i}"
    override = None
    if adapters:
        override = {t: apply_lora(weights[f"{p}.attn.{t}.W"], a) for t, a in adapters.items()}
    h = nn.norm(x, weights, f"{p}.ln1", cfg.ln_eps)
    x = add(x, nn.multi_head_attention(h, h, weights, f"{p}.attn", cfg.heads, weights=override))
    h = nn.norm(x, weights, f"{p}.ln2", cfg.ln_eps)
    return add(x, nn.feed_forward(h, weights, f"{p}.mlp"))


def run_blocks(x: Tensor, cfg: ModelConfig, weights: dict, adapters=None, start: int = 0, stop=None) -> Tensor:
    """Apply blocks ``start..stop``; adapters attach to the last block only."""
    stop = cfg.enc_blocks if stop is None else stop
    for i in range(start, stop):
        last = i == cfg.enc_blocks - 1
        x = encoder_block(x, cfg, weights, i, adapters if last else None)
    return x


def split_frames(x: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    n = cfg.tokens_per_frame
    if x.shape[1] != 2 * n:
        raise DimensionError(f"expected {2 * n} tokens, got {x.shape[1]}")
    return getitem(x, (slice(None), slice(0, n))), getitem(x, (slice(None), slice(n, 2 * n)))


def encode(tokens: Tensor, cfg: ModelConfig, weights: dict, adapters=None) -> tuple[Tensor, Tensor]:
    """Joint attention over all 2hw tokens, then split back into F1, F2."""
    if tokens.shape[1] != 2 * cfg.tokens_per_frame:
        raise DimensionError(f"expected {2 * cfg.tokens_per_frame} tokens, got {tokens.shape[1]}")
    return split_frames(run_blocks(tokens, cfg, weights, adapters), cfg)


def project(F1: Tensor, F2: Tensor, weights: dict) -> tuple[Tensor, Tensor]:
    W, b = weights["projector.W"], weights["projector.b"]
    if F1.shape[-1] != W.shape[0]:
        raise DimensionError(f"projector expects width {W.shape[0]}, got {F1.shape[-1]}")
    return linear(F1, W, b), linear(F2, W, b)
