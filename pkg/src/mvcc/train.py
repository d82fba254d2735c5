"""Training runs: configuration, mask sources, the epoch loop and model selection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mvcc.data import Instance, Vocabulary, binarize_mask, build_vocab, load_dataset, pad_batch, read_pgm
from mvcc.encoder import ModelConfig
from mvcc.errors import ConfigError, IngestionError, TrainingError
from mvcc.maskguide import coarse_mask, diff_cd_baseline
from mvcc.metrics import MetricReport, bleu, score_corpus, tokenize
from mvcc.model import MVCCModel
from mvcc.numerics import AdamState, Tape, adam_step, backward

log = logging.getLogger(__name__)

MASK_SOURCES = ("oracle", "baseline", "none", "file")
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"vocab_size"}


@dataclass
class RunConfig:
    dataset: str
    image_root: str | None = None
    out_dir: str = "runs/mvcc"
    checkpoint: str | None = None
    log: str | None = None
    report: str | None = None
    lr: float = 3e-4
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    mask_source: str = "oracle"
    mask_dir: str | None = None
    downsample: str = "nearest"
    cd_threshold: float = 0.2
    cd_min_blob: int = 8
    use_lora: bool = True
    min_freq: int = 1
    figures: bool = True
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        if self.mask_source == "file" and not self.mask_dir:
            raise ConfigError("mask_source 'file' needs mask_dir")
        if self.downsample not in ("nearest", "any"):
            raise ConfigError(f"downsample must be 'nearest' or 'any', got {self.downsample!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        unknown = set(self.model) - _MODEL_FIELDS
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Model fields may be given flat or under a ``model`` key."""
        if "dataset" not in d:
            raise ConfigError("config needs a 'dataset' entry")
        own = {f.name for f in fields(cls)}
        model = dict(d.get("model", {}))
        kwargs = {}
        for k, v in d.items():
            if k == "model":
                continue
            if k in own:
                kwargs[k] = v
            elif k in _MODEL_FIELDS:
                model[k] = v
            else:
                raise ConfigError(f"unknown config field {k!r}")
        return cls(model=model, **kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def path(self, name: str, default: str) -> Path:
        explicit = getattr(self, name)
        return Path(explicit) if explicit else Path(self.out_dir) / default


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_bleu4: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int | None:
        """Epoch with the highest validation BLEU-4; the earliest wins ties."""
        best = None
        for r in self.records:
            if best is None or r.val_bleu4 > best.val_bleu4:
                best = r
        return None if best is None else best.epoch

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r)) for r in self.records]
        lines.append(json.dumps({"best_epoch": self.best_epoch}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        recs = [json.loads(l) for l in text.splitlines() if l.strip()]
        return cls([EpochRecord(**r) for r in recs if "epoch" in r])


@dataclass
class TrainResult:
    model: MVCCModel
    vocab: Vocabulary
    log: TrainLog
    test_report: MetricReport | None
    checkpoint: Path
    final_loss: float


# masks


def instance_masks(instances: Sequence[Instance], cfg: RunConfig, grid: int) -> np.ndarray:
    """Coarse (N, grid, grid) masks for the configured mask source."""
    out = np.zeros((len(instances), grid, grid), dtype=np.uint8)
    for i, inst in enumerate(instances):
        if cfg.mask_source == "none":
            out[i] = 1
            continue
        if cfg.mask_source == "oracle":
            if inst.mask is None:
                raise IngestionError(f"record {inst.id!r}: mask_source 'oracle' but no mask")
            full = inst.mask
        elif cfg.mask_source == "baseline":
            full = diff_cd_baseline(inst.image_a, inst.image_b, cfg.cd_threshold, cfg.cd_min_blob)
        else:
            path = Path(cfg.mask_dir) / f"{inst.id}.pgm"
            try:
                full = binarize_mask(read_pgm(path))
            except (OSError, ValueError) as exc:
                raise IngestionError(f"record {inst.id!r}: bad mask file {path} ({exc})") from exc
        out[i] = coarse_mask(full, grid, cfg.downsample)
    return out


# loop


def _prefixes(model: MVCCModel, instances: Sequence[Instance], chunk: int = 64) -> np.ndarray:
    parts = []
    for s in range(0, len(instances), chunk):
        batch = instances[s : s + chunk]
        a = np.stack([x.image_a for x in batch])
        b = np.stack([x.image_b for x in batch])
        parts.append(model.encode_prefix(a, b))
    return np.concatenate(parts)


def decode_all(model: MVCCModel, prefixes: np.ndarray, masks: np.ndarray, vocab: Vocabulary, chunk: int = 100) -> list[str]:
    captions = []
    for s in range(0, len(prefixes), chunk):
        ids = model.caption_from_prefix(prefixes[s : s + chunk], masks[s : s + chunk])
        captions.extend(vocab.decode(x) for x in ids)
    return captions


def _bleu4(captions: list[str], instances: Sequence[Instance]) -> float:
    return 100.0 * bleu([tokenize(c) for c in captions], [[tokenize(r) for r in x.captions] for x in instances])[3]


def _split(instances, name):
    return [x for x in instances if x.split == name]


def train(cfg: RunConfig, progress: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train, keep the best-validation-BLEU-4 epoch, save it and score the test split."""
    instances = load_dataset(cfg.dataset, cfg.image_root)
    train_set, val_set, test_set = (_split(instances, s) for s in ("train", "val", "test"))
    if not train_set:
        raise IngestionError("dataset has no training instances")
    val_set = val_set or test_set
    vocab = build_vocab((c for x in train_set for c in x.captions), cfg.min_freq)
    model_cfg = ModelConfig(**{**cfg.model, "vocab_size": len(vocab)})
    if train_set[0].image_a.shape[:2] != (model_cfg.image_size, model_cfg.image_size):
        raise ConfigError(f"images are {train_set[0].image_a.shape[:2]}, config expects {model_cfg.image_size}")

    grid = model_cfg.grid
    train_masks = instance_masks(train_set, cfg, grid)
    val_masks = instance_masks(val_set, cfg, grid)

    ckpt_path = cfg.path("checkpoint", "model.ckpt")
    log_path = cfg.path("log", "train_log.jsonl")
    for p in (ckpt_path, log_path):
        p.parent.mkdir(parents=True, exist_ok=True)

    model = MVCCModel(model_cfg, seed=cfg.seed, use_lora=cfg.use_lora)
    order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    train_prefix = _prefixes(model, train_set)
    val_prefix = _prefixes(model, val_set)
    refs = pad_batch([vocab.encode(x.captions[0], model_cfg.max_len) for x in train_set])
    params = model.trainable()
    state = AdamState(lr=cfg.lr)

    train_log = TrainLog()
    best_state, best_bleu = None, -math.inf
    loss_value = math.nan
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        losses = []
        for step, s in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[s : s + cfg.batch_size]
            batch_refs = refs[idx]
            batch_refs = batch_refs[:, : int((batch_refs != 0).sum(axis=1).max())]
            with Tape() as tape:
                loss = model.loss_from_prefix(train_prefix[idx], train_masks[idx], batch_refs)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            backward(loss, tape)
            try:
                adam_step(params, None, state)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            losses.append(loss_value)
        val_b4 = _bleu4(decode_all(model, val_prefix, val_masks, vocab), val_set)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_b4)
        train_log.records.append(rec)
        log.info("epoch %d loss %.4f val BLEU-4 %.2f", epoch, rec.loss, val_b4)
        if progress:
            progress(rec)
        if val_b4 > best_bleu:
            best_bleu, best_state = val_b4, model.state_dict()

    model.load_state_dict(best_state)
    meta = {"vocab": vocab.to_list(), "best_epoch": train_log.best_epoch, "seed": cfg.seed}
    model.save(ckpt_path, meta)
    log_path.write_text(train_log.to_jsonl())

    report = None
    if test_set:
        test_masks = instance_masks(test_set, cfg, grid)
        caps = decode_all(model, _prefixes(model, test_set), test_masks, vocab)
        report = score_corpus(caps, [x.captions for x in test_set])
        report_path = cfg.path("report", "test_report.json")
        report_path.write_text(report.to_json())
        report_path.with_suffix(".captions.txt").write_text("\n".join(caps) + "\n")
    if cfg.figures:
        from mvcc import plots

        plots.plot_training(train_log, log_path.with_suffix(".png"))
        if report is not None:
            plots.plot_report(report, cfg.path("report", "test_report.json").with_suffix(".png"))
    return TrainResult(model, vocab, train_log, report, ckpt_path, loss_value)
