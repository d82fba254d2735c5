"""The full change-captioning pipeline: encoder -> projector -> mask filter -> decoder."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from mvcc import decoder as dec
from mvcc import encoder as enc
from mvcc.encoder import LORA_TARGETS, LoraAdapter, ModelConfig
from mvcc.errors import VersionError
from mvcc.maskguide import build_memory
from mvcc.numerics import Tensor, load_checkpoint, parameter, save_checkpoint


class MVCCModel:
    """Weights plus the forward paths used for training and inference.

    The encoder base is frozen; LoRA adapters on the last block's q/k/v, the
    projector and the decoder are trainable.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, use_lora: bool = True):
        self.cfg = cfg
        init = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        self.encoder = enc.init_encoder(cfg, init)
        self.adapters: dict[str, LoraAdapter] = enc.init_adapters(cfg, init) if use_lora and cfg.enc_blocks else {}
        self.projector = enc.init_projector(cfg, init)
        self.decoder = dec.init_decoder(cfg, init)

    # parameter bookkeeping

    def lora_tensors(self) -> dict[str, Tensor]:
        out = {}
        for t, a in self.adapters.items():
            out[f"lora.{t}.A"] = a.A
            out[f"lora.{t}.B"] = a.B
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {**self.lora_tensors(), **self.projector, **self.decoder}

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.encoder, **self.trainable()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = self.named_tensors()
        if set(mine) != set(state):
            missing = sorted(set(mine) - set(state))[:3]
            extra = sorted(set(state) - set(mine))[:3]
            raise VersionError(f"checkpoint tensors do not match model (missing {missing}, unexpected {extra})")
        for k, t in mine.items():
            if t.shape != state[k].shape:
                raise VersionError(f"tensor {k!r} has shape {state[k].shape}, model expects {t.shape}")
            t.data[...] = state[k]

    # forward paths

    def encode_prefix(self, image_a, image_b) -> np.ndarray:
        """Frozen part of the encoder: patch embedding and all blocks but the last."""
        x = enc.patchify(image_a, image_b, self.cfg, self.encoder)
        return enc.run_blocks(x, self.cfg, self.encoder, stop=max(self.cfg.enc_blocks - 1, 0)).data

    def encode_tail(self, prefix: np.ndarray) -> tuple[Tensor, Tensor]:
        x = Tensor._wrap(np.asarray(prefix))
        start = max(self.cfg.enc_blocks - 1, 0)
        x = enc.run_blocks(x, self.cfg, self.encoder, self.adapters, start=start)
        return enc.split_frames(x, self.cfg)

    def encode(self, image_a, image_b) -> tuple[Tensor, Tensor]:
        return self.encode_tail(self.encode_prefix(image_a, image_b))

    def memory(self, F1: Tensor, F2: Tensor, coarse_masks, mode: str | None = None):
        P1, P2 = enc.project(F1, F2, self.projector)
        return build_memory(P1, P2, coarse_masks, mode or self.cfg.mask_mode)

    def logits(self, memory: Tensor, key_valid, input_ids) -> Tensor:
        return dec.decode_forward(dec.embed(input_ids, self.decoder), memory, self.decoder, self.cfg, key_valid)

    def forward(self, image_a, image_b, coarse_masks, input_ids, mode: str | None = None) -> Tensor:
        F1, F2 = self.encode(image_a, image_b)
        memory, valid = self.memory(F1, F2, coarse_masks, mode)
        return self.logits(memory, valid, input_ids)

    def loss_from_prefix(self, prefix, coarse_masks, references) -> Tensor:
        inputs, targets = dec.teacher_forcing_split(references)
        memory, valid = self.memory(*self.encode_tail(prefix), coarse_masks)
        return dec.caption_loss(self.logits(memory, valid, inputs), targets)

    def caption_from_prefix(self, prefix, coarse_masks) -> list[list[int]]:
        memory, valid = self.memory(*self.encode_tail(prefix), coarse_masks)
        return dec.greedy_decode(memory, self.decoder, self.cfg, valid)

    def caption(self, image_a, image_b, coarse_masks) -> list[list[int]]:
        return self.caption_from_prefix(self.encode_prefix(image_a, image_b), coarse_masks)

    # persistence

    def save(self, path, extra: dict | None = None) -> None:
        """Write tensors to ``path`` and config/metadata to ``path`` + ``.json``."""
        save_checkpoint(path, self.state_dict())
        meta = {"model": self.cfg.to_dict(), "use_lora": bool(self.adapters), **(extra or {})}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> tuple["MVCCModel", dict]:
        meta_path = Path(str(path) + ".json")
        if not meta_path.exists():
            raise VersionError(f"missing checkpoint metadata {meta_path}")
        meta = json.loads(meta_path.read_text())
        model = cls(ModelConfig.from_dict(meta["model"]), use_lora=meta.get("use_lora", True))
        model.load_state_dict(load_checkpoint(path))
        return model, meta


__all__ = ["MVCCModel", "LORA_TARGETS"]
