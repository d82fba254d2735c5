"""Command-line entry point: ``mvcc gen-data | train | caption | eval | ablation``.

Exit codes: 0 success, 2 config error, 3 ingestion error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mvcc.errors import ConfigError, IngestionError, MVCCError

log = logging.getLogger("mvcc")


def _parse_splits(text: str) -> dict:
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        if name not in ("train", "val", "test") or not value:
            raise ConfigError(f"bad --splits entry {part!r}; use e.g. train=0.8,val=0.1,test=0.1")
        out[name] = int(value) if value.isdigit() else float(value)
    return out


def cmd_gen_data(args) -> int:
    from mvcc.data import generate

    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    splits = _parse_splits(args.splits) if args.splits else None
    generate(args.seed, args.n, args.out, distractors=args.distractors == "on", splits=splits)
    print(f"wrote {args.n} instances to {args.out}")
    return 0


def cmd_train(args) -> int:
    from mvcc.train import RunConfig, train

    cfg = RunConfig.from_file(args.config)
    if not Path(cfg.dataset).exists():
        raise IngestionError(f"dataset not found: {cfg.dataset}")

    def progress(rec):
        print(f"epoch {rec.epoch}\tloss {rec.loss:.4f}\tval_bleu4 {rec.val_bleu4:.2f}", flush=True)

    result = train(cfg, progress)
    print(f"best epoch {result.log.best_epoch}; checkpoint {result.checkpoint}")
    if result.test_report is not None:
        print(result.test_report.table())
    return 0


def _caption_mask(args, image_a, image_b, grid: int) -> np.ndarray:
    from mvcc.data import binarize_mask, read_pgm
    from mvcc.maskguide import coarse_mask, diff_cd_baseline

    if args.mask == "none":
        return np.ones((grid, grid), dtype=np.uint8)
    if args.mask == "baseline":
        return coarse_mask(diff_cd_baseline(image_a, image_b, args.cd_threshold, args.cd_min_blob), grid, args.downsample)
    if not args.mask_file:
        raise ConfigError(f"--mask {args.mask} needs --mask-file")
    try:
        raw = binarize_mask(read_pgm(args.mask_file))
    except OSError as exc:
        raise IngestionError(f"cannot read mask {args.mask_file}: {exc}") from exc
    except ValueError as exc:
        raise IngestionError(f"{args.mask_file}: non-binary mask ({exc})") from exc
    if raw.shape != (grid, grid) and raw.shape != image_a.shape[:2]:
        raise IngestionError(f"mask {raw.shape} is neither {grid}x{grid} nor the image size {image_a.shape[:2]}")
    return coarse_mask(raw, grid, args.downsample)


def cmd_caption(args) -> int:
    from mvcc.data import Vocabulary, read_ppm
    from mvcc.model import MVCCModel

    if not Path(args.checkpoint).exists():
        raise IngestionError(f"checkpoint not found: {args.checkpoint}")
    model, meta = MVCCModel.load(args.checkpoint)
    if "vocab" not in meta:
        raise ConfigError("checkpoint metadata has no vocabulary")
    vocab = Vocabulary.from_list(meta["vocab"])
    try:
        a, b = read_ppm(args.pair[0]), read_ppm(args.pair[1])
    except OSError as exc:
        raise IngestionError(f"cannot read image pair: {exc}") from exc
    size = model.cfg.image_size
    if a.shape != (size, size, 3) or b.shape != a.shape:
        raise ConfigError(f"images {a.shape}/{b.shape} do not match the model's {size}x{size}")
    mask = _caption_mask(args, a, b, model.cfg.grid)
    ids = model.caption(a, b, mask[None])[0]
    print(vocab.decode(ids))
    return 0


def cmd_eval(args) -> int:
    from mvcc.metrics import evaluate_corpus

    report = evaluate_corpus(args.candidates, args.references)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
        out.with_suffix(".tsv").write_text(report.table() + "\n")
        if not args.no_figure:
            from mvcc import plots

            plots.plot_report(report, out.with_suffix(".png"))
        print(report.table())
    else:
        print(report.to_json())
    return 0


def cmd_ablation(args) -> int:
    """Train the unguided / baseline-CD / oracle-mask variants over several seeds."""
    from mvcc import plots
    from mvcc.train import RunConfig, train

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    base.setdefault("dataset", args.dataset)
    if not base.get("dataset"):
        raise ConfigError("ablation needs --dataset or a config with 'dataset'")
    out = Path(args.out)
    settings = {"unguided": "none", "baseline": "baseline", "oracle": "oracle"}
    scores: dict[str, list[float]] = {k: [] for k in settings}
    rows = ["seed\tsetting\tbleu4\tcider_d\tbest_epoch"]
    for seed in args.seeds:
        for name, source in settings.items():
            cfg = RunConfig.from_dict(
                {**base, "seed": seed, "mask_source": source, "out_dir": str(out / f"{name}_seed{seed}")}
            )
            res = train(cfg)
            scores[name].append(res.test_report.bleu4)
            rows.append(f"{seed}\t{name}\t{res.test_report.bleu4:.4f}\t{res.test_report.cider_d:.4f}\t{res.log.best_epoch}")
            print(rows[-1], flush=True)
    (out / "ablation.tsv").write_text("\n".join(rows) + "\n")
    plots.plot_ablation(scores, out / "ablation.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvcc", description="Mask-guided change captioning on bi-temporal image pairs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic bi-temporal dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--distractors", choices=("on", "off"), default="on")
    g.add_argument("--splits", help="e.g. train=0.8,val=0.1,test=0.1 or train=800,val=100,test=200")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("caption", help="caption one image pair")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--pair", nargs=2, required=True, metavar=("A.ppm", "B.ppm"))
    c.add_argument("--mask", choices=("oracle", "baseline", "none", "file"), required=True)
    c.add_argument("--mask-file", help="PGM mask at image or token resolution (for --mask oracle/file)")
    c.add_argument("--downsample", choices=("nearest", "any"), default="nearest")
    c.add_argument("--cd-threshold", type=float, default=0.2)
    c.add_argument("--cd-min-blob", type=int, default=8)
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("eval", help="score candidate captions against references")
    e.add_argument("--candidates", required=True)
    e.add_argument("--references", required=True)
    e.add_argument("--out", help="write report JSON here, with .tsv and .png alongside")
    e.add_argument("--no-figure", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablation", help="mask-guidance ablation over seeds")
    a.add_argument("--dataset")
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--out", default="runs/ablation")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = int(os.environ.get("MVCC_THREADS", "1"))
    except ValueError:
        print("error: MVCC_THREADS must be an integer", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=max(threads, 1)):
            return args.func(args)
    except MVCCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IngestionError.exit_code


if __name__ == "__main__":
    sys.exit(main())
