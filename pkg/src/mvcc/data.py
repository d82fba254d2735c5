"""Synthetic bi-temporal scenes, vocabulary, and annotation ingestion.

Scenes are 64 x 64 by default: a textured background, buildings (flat-roofed
rectangles) and roads (full-length strips) that may appear or disappear
between the two frames. Distractors (a global brightness shift and vegetation
speckle) change pixels without entering the mask or the captions.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from mvcc.decoder import BOS, EOS, PAD, UNK
from mvcc.errors import IngestionError, VocabularyError
from mvcc.metrics import tokenize

ROOF_COLORS = ((0.92, 0.9, 0.86), (0.85, 0.22, 0.15), (0.2, 0.3, 0.88))
ROAD_COLOR = (0.66, 0.66, 0.68)
GROUND_COLOR = (0.36, 0.44, 0.28)
VEGETATION_COLOR = (0.05, 0.62, 0.05)

QUADRANTS = {(0, 0): "top left", (0, 1): "top right", (1, 0): "bottom left", (1, 1): "bottom right"}
ROAD_SIDES = {
    ("h", 0): "across the top",
    ("h", 1): "across the bottom",
    ("v", 0): "along the left",
    ("v", 1): "along the right",
}
TEMPLATES = {
    ("building", "appear"): (
        "a building appears in the {loc}",
        "a new building is built in the {loc}",
        "a house is built in the {loc}",
    ),
    ("building", "disappear"): (
        "a building disappears from the {loc}",
        "a building is removed from the {loc}",
        "a house is demolished in the {loc}",
    ),
    ("road", "appear"): ("a road is built {loc}", "a new road appears {loc}"),
    ("road", "disappear"): ("a road is removed {loc}", "the road {loc} disappears"),
}
NO_CHANGE = ("the scene is the same", "there is no change", "nothing has changed")


@dataclass
class SceneObject:
    kind: str  # building | road
    y0: int
    x0: int
    height: int
    width: int
    event: str  # appear | disappear | none
    color: tuple[float, float, float]
    location: str

    def footprint(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=bool)
        m[self.y0 : self.y0 + self.height, self.x0 : self.x0 + self.width] = True
        return m


@dataclass
class SceneSpec:
    size: int
    objects: list[SceneObject]
    background_seed: int
    brightness_amp: float = 0.0
    vegetation_amp: float = 0.0
    distractor_seed: int = 0

    @property
    def events(self) -> list[SceneObject]:
        return [o for o in self.objects if o.event != "none"]


@dataclass
class Instance:
    id: str
    image_a: np.ndarray
    image_b: np.ndarray
    mask: np.ndarray | None = None
    captions: list[str] = field(default_factory=list)
    split: str = "train"


# scene sampling and rendering


def _sample_building(rng, size: int) -> SceneObject:
    half = size // 2
    qr, qc = int(rng.integers(2)), int(rng.integers(2))
    cell = size // 4
    h, w = int(rng.integers(10, 15)), int(rng.integers(10, 15))
    # cover at least one token-cell centre so nearest downsampling sees it
    cy = qr * half + cell // 2 + cell * int(rng.integers(2))
    cx = qc * half + cell // 2 + cell * int(rng.integers(2))
    y0 = int(rng.integers(max(qr * half, cy - h + 1), min(cy, qr * half + half - h) + 1))
    x0 = int(rng.integers(max(qc * half, cx - w + 1), min(cx, qc * half + half - w) + 1))
    color = ROOF_COLORS[int(rng.integers(len(ROOF_COLORS)))]
    return SceneObject("building", y0, x0, h, w, "none", color, QUADRANTS[(qr, qc)])


def _sample_road(rng, size: int) -> SceneObject:
    half, cell = size // 2, size // 4
    orient = "h" if rng.random() < 0.5 else "v"
    side = int(rng.integers(2))
    thick = int(rng.integers(5, 8))
    centre = side * half + cell // 2 + cell * int(rng.integers(2))
    start = int(rng.integers(max(side * half, centre - thick + 1), min(centre, side * half + half - thick) + 1))
    if orient == "h":
        return SceneObject("road", start, 0, thick, size, "none", ROAD_COLOR, ROAD_SIDES[(orient, side)])
    return SceneObject("road", 0, start, size, thick, "none", ROAD_COLOR, ROAD_SIDES[(orient, side)])


def sample_scene(rng: np.random.Generator, size: int = 64, distractors: bool = True) -> SceneSpec:
    n_events = int(rng.choice(3, p=(0.25, 0.5, 0.25)))
    n_static = int(rng.integers(0, 3))
    objects: list[SceneObject] = []
    occupied = np.zeros((size, size), dtype=bool)
    has_road = False
    wanted = ["appear" if rng.random() < 0.5 else "disappear" for _ in range(n_events)] + ["none"] * n_static
    for event in wanted:
        for _ in range(50):
            road = not has_road and rng.random() < 0.3
            obj = _sample_road(rng, size) if road else _sample_building(rng, size)
            fp = obj.footprint(size)
            if not (ndimage.binary_dilation(fp, iterations=2) & occupied).any():
                obj.event = event
                objects.append(obj)
                occupied |= fp
                has_road |= road
                break
    return SceneSpec(
        size=size,
        objects=objects,
        background_seed=int(rng.integers(2**31)),
        brightness_amp=0.1 if distractors else 0.0,
        vegetation_amp=1.0 if distractors else 0.0,
        distractor_seed=int(rng.integers(2**31)),
    )


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (image_a, image_b, oracle_mask) for a scene; pure function of ``spec``."""
    n = spec.size
    rng = np.random.default_rng(spec.background_seed)
    texture = ndimage.gaussian_filter(rng.standard_normal((n, n, 3)), sigma=(2, 2, 0)) * 0.12
    ground = np.asarray(GROUND_COLOR) + texture
    a, b = ground.copy(), ground.copy()
    mask = np.zeros((n, n), dtype=np.uint8)
    for obj in spec.objects:
        fp = obj.footprint(n)
        if obj.event in ("none", "disappear"):
            a[fp] = obj.color
        if obj.event in ("none", "appear"):
            b[fp] = obj.color
        if obj.event != "none":
            mask[fp] = 1

    drng = np.random.default_rng(spec.distractor_seed)
    if spec.vegetation_amp > 0:
        objects_fp = np.zeros((n, n), dtype=bool)
        for obj in spec.objects:
            objects_fp |= obj.footprint(n)
        free = ~ndimage.binary_dilation(objects_fp, iterations=2)
        yy, xx = np.mgrid[0:n, 0:n]
        for _ in range(int(drng.integers(0, 7))):
            cy, cx = drng.integers(0, n, size=2)
            radius = drng.uniform(0.8, 5.0)
            blob = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2) & free
            target = b if drng.random() < 0.5 else a
            strength = spec.vegetation_amp * drng.uniform(0.7, 1.0)
            target[blob] = (1 - strength) * target[blob] + strength * np.asarray(VEGETATION_COLOR)
    if spec.brightness_amp > 0:
        b = b + drng.uniform(-spec.brightness_amp, spec.brightness_amp)
    return _quantize(a), _quantize(b), mask


# captions


def _clause(obj: SceneObject, variant: int) -> str:
    options = TEMPLATES[(obj.kind, obj.event)]
    return options[variant % len(options)].format(loc=obj.location)


def captions_for(spec: SceneSpec, rng: np.random.Generator, max_captions: int = 5) -> list[str]:
    """Up to ``max_captions`` distinct paraphrases; the first is canonical."""
    events = sorted(spec.events, key=lambda o: (o.y0, o.x0))
    if not events:
        return list(NO_CHANGE[:max_captions])
    out = [" and ".join(_clause(o, 0) for o in events)]
    for _ in range(40):
        if len(out) >= max_captions:
            break
        order = list(events)
        if len(order) > 1 and rng.random() < 0.5:
            order.reverse()
        text = " and ".join(_clause(o, int(rng.integers(3))) for o in order)
        if text not in out:
            out.append(text)
    return out


_EVENT_WORDS = {
    "appears": "appear",
    "built": "appear",
    "disappears": "disappear",
    "removed": "disappear",
    "demolished": "disappear",
}


def parse_caption(caption: str) -> list[tuple[str, str, str]]:
    """Parse a template caption into (kind, event, location) clauses."""
    text = " ".join(tokenize(caption))
    if text in NO_CHANGE:
        return []
    clauses = []
    for part in text.split(" and "):
        words = part.split()
        kind = "road" if "road" in words else "building" if {"building", "house"} & set(words) else None
        event = next((_EVENT_WORDS[w] for w in words if w in _EVENT_WORDS), None)
        locs = list(QUADRANTS.values()) if kind == "building" else list(ROAD_SIDES.values())
        loc = next((l for l in locs if f" {l}" in f" {part}"), None)
        if kind is None or event is None or loc is None:
            raise ValueError(f"unparseable clause {part!r}")
        clauses.append((kind, event, loc))
    return clauses


def check_consistency(caption: str, mask: np.ndarray, image_a: np.ndarray, image_b: np.ndarray) -> bool:
    """Rule-based check that a caption's events, kinds and places match the mask.

    Every mask component must be described by exactly one clause with the
    right kind (full-length strip = road), location (quadrant or side) and
    direction (the frame where the region is flat-coloured holds the object).
    """
    try:
        clauses = parse_caption(caption)
    except ValueError:
        return False
    n = mask.shape[0]
    half = n // 2
    labels, count = ndimage.label(np.asarray(mask) != 0)
    if count != len(clauses):
        return False
    found = []
    for k in range(1, count + 1):
        ys, xs = np.nonzero(labels == k)
        y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
        if x1 - x0 + 1 == n and y1 - y0 + 1 < half:
            kind, loc = "road", ROAD_SIDES[("h", int(y0 >= half))]
            if (y0 < half) != (y1 < half):
                return False
        elif y1 - y0 + 1 == n and x1 - x0 + 1 < half:
            kind, loc = "road", ROAD_SIDES[("v", int(x0 >= half))]
            if (x0 < half) != (x1 < half):
                return False
        else:
            qr, qc = int(y0 >= half), int(x0 >= half)
            if int(y1 >= half) != qr or int(x1 >= half) != qc:
                return False
            kind, loc = "building", QUADRANTS[(qr, qc)]
        region = labels == k
        spread_a = np.asarray(image_a)[region].std(axis=0).sum()
        spread_b = np.asarray(image_b)[region].std(axis=0).sum()
        event = "appear" if spread_b < spread_a else "disappear"
        found.append((kind, event, loc))
    return sorted(found) == sorted(clauses)


# image I/O


def write_ppm(path, image: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path, format="PPM")


def write_pgm(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, mode="L").save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read a mask as raw grey values (no binarisation)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def binarize_mask(raw: np.ndarray) -> np.ndarray:
    """Accept masks whose nonzero pixels share one value; anything else is not binary."""
    values = np.unique(raw)
    if len(values[values != 0]) > 1:
        raise ValueError(f"mask has {len(values)} distinct levels")
    return (raw != 0).astype(np.uint8)


# dataset generation


def split_counts(n: int, splits) -> dict[str, int]:
    """``splits`` maps split -> fraction or absolute count (counts must sum to n)."""
    names = list(splits)
    values = [splits[k] for k in names]
    if all(isinstance(v, int) for v in values) and sum(values) == n:
        return dict(zip(names, values))
    total = float(sum(values))
    counts = [int(n * v / total) for v in values]
    counts[0] += n - sum(counts)
    return dict(zip(names, counts))


def generate_instance(seed: int, index: int, size: int = 64, distractors: bool = True) -> tuple[SceneSpec, Instance]:
    rng = np.random.default_rng([seed, index])
    spec = sample_scene(rng, size, distractors)
    a, b, mask = render(spec)
    return spec, Instance(f"{index:05d}", a, b, mask, captions_for(spec, rng))


def generate(
    seed: int,
    n: int,
    out_dir,
    distractors: bool = True,
    splits=None,
    size: int = 64,
) -> list[Instance]:
    """Write ``n`` instances under ``out_dir`` and return them.

    Layout: ``annotations.jsonl`` plus ``images/{id}_{a,b}.ppm`` and
    ``masks/{id}.pgm``; paths in the annotations are relative to ``out_dir``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create dataset directory {out}: {exc}") from exc
    counts = split_counts(n, splits or {"train": 0.8, "val": 0.1, "test": 0.1})
    order = [name for name, c in counts.items() for _ in range(c)]
    instances, lines = [], []
    for i in range(n):
        _, inst = generate_instance(seed, i, size, distractors)
        inst.split = order[i]
        rec = {
            "id": inst.id,
            "img_a": f"images/{inst.id}_a.ppm",
            "img_b": f"images/{inst.id}_b.ppm",
            "mask": f"masks/{inst.id}.pgm",
            "captions": inst.captions,
            "split": inst.split,
        }
        write_ppm(out / rec["img_a"], inst.image_a)
        write_ppm(out / rec["img_b"], inst.image_b)
        write_pgm(out / rec["mask"], inst.mask)
        lines.append(json.dumps(rec, sort_keys=True))
        instances.append(inst)
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return instances


# ingestion


def _annotation_path(path) -> Path:
    p = Path(path)
    return p / "annotations.jsonl" if p.is_dir() else p


def load_dataset(annotations, image_root=None, split: str | Sequence[str] | None = None) -> list[Instance]:
    """Load a JSON-lines annotation file (or a directory holding ``annotations.jsonl``)."""
    ann = _annotation_path(annotations)
    if not ann.exists():
        raise IngestionError(f"annotation file not found: {ann}")
    root = Path(image_root) if image_root is not None else ann.parent
    wanted = {split} if isinstance(split, str) else set(split) if split else None
    out: list[Instance] = []
    seen: dict[str, str] = {}
    for lineno, line in enumerate(ann.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{ann}:{lineno}: malformed JSON ({exc.msg})") from exc
        rid = rec.get("id") if isinstance(rec, dict) else None
        if not isinstance(rid, str):
            raise IngestionError(f"{ann}:{lineno}: record without string id")
        for key in ("img_a", "img_b", "captions", "split"):
            if key not in rec:
                raise IngestionError(f"record {rid!r}: missing field {key!r}")
        if rec["split"] not in ("train", "val", "test"):
            raise IngestionError(f"record {rid!r}: unknown split {rec['split']!r}")
        if rid in seen:
            raise IngestionError(f"record {rid!r}: duplicate id (splits {seen[rid]!r} and {rec['split']!r})")
        seen[rid] = rec["split"]
        if not isinstance(rec["captions"], list) or not all(isinstance(c, str) for c in rec["captions"]):
            raise IngestionError(f"record {rid!r}: captions must be a list of strings")
        if wanted is not None and rec["split"] not in wanted:
            continue
        try:
            a = read_ppm(root / rec["img_a"])
            b = read_ppm(root / rec["img_b"])
        except (OSError, ValueError) as exc:
            raise IngestionError(f"record {rid!r}: cannot read image ({exc})") from exc
        if a.shape != b.shape:
            raise IngestionError(f"record {rid!r}: image shapes differ {a.shape} vs {b.shape}")
        mask = None
        if rec.get("mask"):
            try:
                mask = binarize_mask(read_pgm(root / rec["mask"]))
            except OSError as exc:
                raise IngestionError(f"record {rid!r}: cannot read mask ({exc})") from exc
            except ValueError as exc:
                raise IngestionError(f"record {rid!r}: non-binary mask ({exc})") from exc
            if mask.shape != a.shape[:2]:
                raise IngestionError(f"record {rid!r}: mask {mask.shape} does not match images {a.shape[:2]}")
        out.append(Instance(rid, a, b, mask, list(rec["captions"]), rec["split"]))
    return out


# vocabulary

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        self.itos = list(RESERVED) + list(words)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, caption: str, max_len: int | None = None) -> list[int]:
        """BOS + word ids + EOS, truncated to ``max_len`` with EOS kept."""
        ids = [self.stoi.get(w, UNK) for w in tokenize(caption)]
        if max_len is not None and len(ids) + 2 > max_len:
            ids = ids[: max_len - 2]
        return [BOS, *ids, EOS]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            words.append(self.itos[i])
        return " ".join(words)

    def to_list(self) -> list[str]:
        return self.itos[len(RESERVED) :]

    @classmethod
    def from_list(cls, words: Sequence[str]) -> "Vocabulary":
        return cls(words)


def build_vocab(captions: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Words ordered by (frequency desc, word asc); rarer words map to UNK."""
    counts = Counter(w for c in captions for w in tokenize(c))
    if not counts:
        raise IngestionError("cannot build a vocabulary from an empty caption corpus")
    words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Vocabulary(words)


def build_vocab_from_files(paths: Iterable, min_freq: int = 1) -> Vocabulary:
    captions = []
    for p in paths:
        p = Path(p)
        if p.suffix == ".jsonl" or p.is_dir():
            for line in _annotation_path(p).read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    captions.extend(rec.get("captions") or rec.get("refs") or [])
        else:
            captions.extend(l for l in p.read_text(encoding="utf-8").splitlines() if l.strip())
    return build_vocab(captions, min_freq)


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.intp)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out
