"""Caption corpora: Flickr8k/COCO loaders, a synthetic shapes corpus, vocabulary, preprocessing."""

from __future__ import annotations

import json
import logging
import random
import re
import tempfile
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .errors import EmptyCorpusError, ManifestError, ParseError
from .model import BOS, EOS, PAD, UNK, CaptionBatch, ImageBatch

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,;:!?)'%")


@dataclass
class CaptionEntry:
    image_id: str
    image_path: Path
    captions: list[str]


@dataclass
class CaptionCorpus:
    entries: list[CaptionEntry]
    split_tag: str
    name: str

    def __len__(self):
        return len(self.entries)

    @property
    def num_captions(self) -> int:
        return sum(len(e.captions) for e in self.entries)

    def ids(self) -> set[str]:
        return {e.image_id for e in self.entries}


# -- tokenization -----------------------------------------------------------

def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    id_to_token: list[str]
    min_frequency: int = 1
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    pad, bos, eos, unk = PAD, BOS, EOS, UNK

    def __len__(self):
        return len(self.id_to_token)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def to_dict(self) -> dict:
        return {"id_to_token": list(self.id_to_token), "min_frequency": self.min_frequency}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["id_to_token"]), d.get("min_frequency", 1))


def build_vocabulary(corpus: CaptionCorpus | Iterable[str], min_frequency: int = 1) -> Vocabulary:
    texts = [c for e in corpus.entries for c in e.captions] if isinstance(corpus, CaptionCorpus) else list(corpus)
    if not texts:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for t in texts for w in split_words(t))
    kept = sorted((w for w, c in counts.items() if c >= min_frequency and w not in SPECIALS),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(list(SPECIALS) + kept, min_frequency)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [BOS] + [vocab.token_to_id.get(w, UNK) for w in split_words(text)] + [EOS]


def strip_specials(ids: Sequence[int]) -> list[int]:
    out = []
    for i in ids:
        if i == EOS:
            break
        if i not in (PAD, BOS):
            out.append(int(i))
    return out


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    text = ""
    for i in strip_specials(ids):
        word = vocab.id_to_token[i] if 0 <= i < len(vocab) else SPECIALS[UNK]
        if text and word not in _NO_SPACE_BEFORE:
            text += " "
        text += word
    return text


def encode_captions(texts: Sequence[str], vocab: Vocabulary, max_len: int) -> CaptionBatch:
    tokens = torch.full((len(texts), max_len), PAD, dtype=torch.long)
    for row, text in enumerate(texts):
        ids = tokenize(text, vocab)
        if len(ids) > max_len:
            ids = ids[: max_len - 1] + [EOS]
        tokens[row, : len(ids)] = torch.tensor(ids)
    return CaptionBatch(tokens, tokens != PAD)


# -- images -----------------------------------------------------------------

def resize_bilinear(pixels: torch.Tensor, image_size: int) -> torch.Tensor:
    """Squash (C, H, W) to a square, half-pixel-centre bilinear; antialiased when shrinking."""
    if tuple(pixels.shape[-2:]) == (image_size, image_size):
        return pixels
    shrink = pixels.shape[-1] > image_size or pixels.shape[-2] > image_size
    out = F.interpolate(pixels[None], size=(image_size, image_size), mode="bilinear",
                        align_corners=False, antialias=shrink)[0]
    return out.clamp_(0.0, 1.0)


def load_image(path, image_size: int) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return resize_bilinear(torch.from_numpy(arr).permute(2, 0, 1).contiguous(), image_size)


def preprocess_images(corpus: CaptionCorpus, image_size: int, batch_size: int = 64,
                      fail_fast: bool = False) -> Iterator[ImageBatch]:
    pixels, ids = [], []
    for entry in corpus.entries:
        try:
            pixels.append(load_image(entry.image_path, image_size))
        except (OSError, ValueError) as exc:
            if fail_fast:
                raise
            log.warning("skipping undecodable image %s: %s", entry.image_path, exc)
            continue
        ids.append(entry.image_id)
        if len(ids) == batch_size:
            yield ImageBatch(torch.stack(pixels), ids)
            pixels, ids = [], []
    if ids:
        yield ImageBatch(torch.stack(pixels), ids)


# -- encoded splits ---------------------------------------------------------

@dataclass
class CaptionDataset:
    """A split held in memory: pixels, the training caption per image, and all references."""

    ids: list[str]
    pixels: torch.Tensor
    tokens: torch.Tensor
    mask: torch.Tensor
    references: list[list[list[int]]]

    def __len__(self):
        return len(self.ids)

    def images(self, index=None) -> ImageBatch:
        if index is None:
            return ImageBatch(self.pixels, list(self.ids))
        index = torch.as_tensor(index)
        return ImageBatch(self.pixels[index], [self.ids[i] for i in index.tolist()])

    def captions(self, index=None) -> CaptionBatch:
        if index is None:
            return CaptionBatch(self.tokens, self.mask)
        return CaptionBatch(self.tokens[index], self.mask[index])

    def with_pixels(self, pixels: torch.Tensor) -> "CaptionDataset":
        return CaptionDataset(list(self.ids), pixels, self.tokens, self.mask, self.references)

    @staticmethod
    def concat(parts: Sequence["CaptionDataset"]) -> "CaptionDataset":
        return CaptionDataset(
            [i for p in parts for i in p.ids],
            torch.cat([p.pixels for p in parts]),
            torch.cat([p.tokens for p in parts]),
            torch.cat([p.mask for p in parts]),
            [r for p in parts for r in p.references],
        )


def encode_split(corpus: CaptionCorpus, vocab: Vocabulary, image_size: int, max_len: int,
                 fail_fast: bool = True) -> CaptionDataset:
    """Decode images and tokenize captions. The first caption is the training/attack target."""
    batches = list(preprocess_images(corpus, image_size, batch_size=256, fail_fast=fail_fast))
    if not batches:
        raise EmptyCorpusError(f"no decodable images in {corpus.name}/{corpus.split_tag}")
    ids = [i for b in batches for i in b.ids]
    by_id = {e.image_id: e for e in corpus.entries}
    caps = encode_captions([by_id[i].captions[0] for i in ids], vocab, max_len)
    refs = [[strip_specials(tokenize(c, vocab)) for c in by_id[i].captions] for i in ids]
    return CaptionDataset(ids, torch.cat([b.pixels for b in batches]), caps.tokens, caps.mask, refs)


def save_split(dataset: CaptionDataset, root, source_split: str = "", extra: dict | None = None) -> Path:
    """Write one float32 ``.npy`` per image plus ``manifest.json``; reloads bit-exactly."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for k, sid in enumerate(dataset.ids):
        rel = f"images/{k:06d}.npy"
        np.save(root / rel, dataset.pixels[k].detach().cpu().numpy())
        rows.append({"source_id": sid, "adversarial_path": rel,
                     "tokens": dataset.tokens[k].tolist(), "caption_refs": dataset.references[k]})
    manifest = {"source_split": source_split, "entries": rows, **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_split(root) -> CaptionDataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ManifestError(f"no manifest at {manifest_path}")
    rows = json.loads(manifest_path.read_text())["entries"]
    if not rows:
        raise EmptyCorpusError(f"empty split at {root}")
    pixels = torch.stack([torch.from_numpy(np.load(root / r["adversarial_path"])) for r in rows])
    tokens = torch.tensor([r["tokens"] for r in rows], dtype=torch.long)
    return CaptionDataset([r["source_id"] for r in rows], pixels, tokens, tokens != PAD,
                          [r["caption_refs"] for r in rows])


# -- corpus splitting -------------------------------------------------------

def split_corpus(corpus: CaptionCorpus, seed: int, train_fraction: float = 0.8) -> tuple[CaptionCorpus, CaptionCorpus]:
    entries = sorted(corpus.entries, key=lambda e: e.image_id)
    random.Random(seed).shuffle(entries)
    n_train = min(max(1, round(train_fraction * len(entries))), len(entries) - 1)
    return (CaptionCorpus(entries[:n_train], "train", corpus.name),
            CaptionCorpus(entries[n_train:], "test", corpus.name))


# -- Flickr8k ---------------------------------------------------------------

_FLICKR_CAPTION_FILES = ("Flickr8k.token.txt", "captions.txt")
_FLICKR_IMAGE_DIRS = ("Flicker8k_Dataset", "Flickr8k_Dataset", "Images", "images")


def _find(root: Path, names: Sequence[str]) -> Path | None:
    return next((root / n for n in names if (root / n).exists()), None)


def parse_flickr_captions(path) -> dict[str, list[str]]:
    grouped: dict[str, list[str]] = defaultdict(list)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, caption = line.partition("\t")
        if not sep or "#" not in name or not caption.strip():
            raise ParseError(f"expected 'image#idx<TAB>caption', got {line[:60]!r}", line=lineno)
        image, _, idx = name.rpartition("#")
        if not idx.isdigit():
            raise ParseError(f"caption index {idx!r} is not an integer", line=lineno)
        grouped[image].append(caption.strip())
    if not grouped:
        raise EmptyCorpusError(f"no captions in {path}")
    return dict(grouped)


def load_flickr8k(root, seed: int = 0) -> tuple[CaptionCorpus, CaptionCorpus]:
    root = Path(root)
    cap_file = _find(root, _FLICKR_CAPTION_FILES)
    if cap_file is None:
        raise ManifestError(f"no Flickr8k captions file under {root}")
    grouped = parse_flickr_captions(cap_file)
    image_dir = _find(root, _FLICKR_IMAGE_DIRS) or root

    entries = {}
    for image, caps in grouped.items():
        path = image_dir / image
        if not path.exists():
            raise ManifestError(f"caption file references missing image {path}")
        if len(caps) != 5:
            log.warning("%s has %d captions (expected 5)", image, len(caps))
        entries[image] = CaptionEntry(image, path, caps)
    corpus = CaptionCorpus(list(entries.values()), "all", "flickr8k")

    train_list, test_list = root / "Flickr_8k.trainImages.txt", root / "Flickr_8k.testImages.txt"
    if train_list.exists() and test_list.exists():
        def pick(p, tag):
            names = [n.strip() for n in p.read_text().splitlines() if n.strip()]
            return CaptionCorpus([entries[n] for n in names if n in entries], tag, "flickr8k")
        train, test = pick(train_list, "train"), pick(test_list, "test")
    else:
        train, test = split_corpus(corpus, seed)
    log.info("flickr8k: %d train / %d test images, %d captions", len(train), len(test), corpus.num_captions)
    return train, test


# -- COCO -------------------------------------------------------------------

class DanglingReferenceError(ParseError):
    pass


def load_coco_captions(annotation_json, image_root, check_files: bool = True) -> CaptionCorpus:
    data = json.loads(Path(annotation_json).read_text(encoding="utf-8"))
    for key in ("images", "annotations"):
        if key not in data:
            raise ParseError(f"COCO annotation file is missing top-level key {key!r}")
    image_root = Path(image_root)
    files = {}
    for img in data["images"]:
        for key in ("id", "file_name"):
            if key not in img:
                raise ParseError(f"COCO image record is missing key {key!r}")
        files[img["id"]] = img["file_name"]
    grouped: dict = defaultdict(list)
    for ann in data["annotations"]:
        for key in ("image_id", "caption"):
            if key not in ann:
                raise ParseError(f"COCO annotation record is missing key {key!r}")
        if ann["image_id"] not in files:
            raise DanglingReferenceError(f"annotation references unknown image_id {ann['image_id']}")
        grouped[ann["image_id"]].append(ann["caption"].strip())

    entries = []
    for image_id in sorted(grouped):
        caps = grouped[image_id]
        if len(caps) != 5:
            log.warning("COCO image %s has %d captions (expected 5)", image_id, len(caps))
        path = image_root / files[image_id]
        if check_files and not path.exists():
            raise ManifestError(f"missing COCO image {path}")
        entries.append(CaptionEntry(str(image_id), path, caps))
    if not entries:
        raise EmptyCorpusError(f"no captioned images in {annotation_json}")
    log.info("coco: %d images, %d captions", len(entries), sum(len(e.captions) for e in entries))
    return CaptionCorpus(entries, "all", "coco")


# -- synthetic shapes corpus ------------------------------------------------

TOY_COLORS = {"red": (220, 30, 30), "green": (30, 170, 40), "blue": (30, 60, 220), "yellow": (230, 200, 20)}
TOY_SHAPES = ("circle", "square", "triangle")
TOY_RELATIONS = {"above": "below", "below": "above", "left of": "right of", "right of": "left of"}
# scenes are drawn with the first-named shape on top or on the left; the inverse
# relation only appears in the second reference caption
TOY_LAYOUTS = ("above", "left of")


def toy_grammar_words() -> set[str]:
    words = {"a"} | set(TOY_COLORS) | set(TOY_SHAPES)
    for rel in TOY_RELATIONS:
        words |= set(rel.split())
    return words


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, r: float, color):
    box = (cx - r, cy - r, cx + r, cy + r)
    if shape == "circle":
        draw.ellipse(box, fill=color)
    elif shape == "square":
        draw.rectangle(box, fill=color)
    else:
        draw.polygon([(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)], fill=color)


def render_scene(scene: tuple, image_size: int, rng: random.Random) -> Image.Image:
    (c1, s1), rel, (c2, s2) = scene
    bg = tuple(rng.randint(235, 255) for _ in range(3))
    img = Image.new("RGB", (image_size, image_size), bg)
    draw = ImageDraw.Draw(img)
    r = image_size * 0.18
    near, far = image_size * 0.27, image_size * 0.73
    jitter = lambda: rng.uniform(-0.06, 0.06) * image_size  # noqa: E731
    mid = image_size / 2
    if rel in ("above", "below"):
        (y1, y2) = (near, far) if rel == "above" else (far, near)
        p1, p2 = (mid + jitter() * 2, y1 + jitter()), (mid + jitter() * 2, y2 + jitter())
    else:
        (x1, x2) = (near, far) if rel == "left of" else (far, near)
        p1, p2 = (x1 + jitter(), mid + jitter() * 2), (x2 + jitter(), mid + jitter() * 2)
    _draw_shape(draw, s1, *p1, r, TOY_COLORS[c1])
    _draw_shape(draw, s2, *p2, r, TOY_COLORS[c2])
    return img


def scene_captions(scene: tuple) -> list[str]:
    (c1, s1), rel, (c2, s2) = scene
    return [f"a {c1} {s1} {rel} a {c2} {s2}", f"a {c2} {s2} {TOY_RELATIONS[rel]} a {c1} {s1}"]


def _random_scene(rng: random.Random) -> tuple:
    first = (rng.choice(sorted(TOY_COLORS)), rng.choice(TOY_SHAPES))
    while True:
        second = (rng.choice(sorted(TOY_COLORS)), rng.choice(TOY_SHAPES))
        if second != first:
            break
    return first, rng.choice(TOY_LAYOUTS), second


def make_toy_corpus(seed: int, num_images: int, image_size: int = 32, root=None,
                    train_fraction: float = 0.8) -> tuple[CaptionCorpus, CaptionCorpus]:
    """Render two-shape scenes with template captions; writes PNGs plus ``manifest.json``."""
    if num_images < 2:
        raise ValueError("toy corpus needs at least two images")
    root = Path(tempfile.mkdtemp(prefix="advcap-toy-")) if root is None else Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    entries = []
    for k in range(num_images):
        scene = _random_scene(rng)
        path = root / "images" / f"toy_{k:05d}.png"
        render_scene(scene, image_size, rng).save(path)
        entries.append(CaptionEntry(f"toy_{k:05d}", path, scene_captions(scene)))
    n_train = min(max(1, round(train_fraction * num_images)), num_images - 1)
    order = list(range(num_images))
    rng.shuffle(order)
    train = CaptionCorpus([entries[i] for i in sorted(order[:n_train])], "train", "toy")
    test = CaptionCorpus([entries[i] for i in sorted(order[n_train:])], "test", "toy")
    write_manifest(root, {"train": train, "test": test}, {"seed": seed, "image_size": image_size, "num_images": num_images})
    return train, test


def write_manifest(root, splits: dict[str, CaptionCorpus], meta: dict | None = None) -> Path:
    root = Path(root)
    payload = {"name": next(iter(splits.values())).name, **(meta or {}), "splits": {
        tag: [{"id": e.image_id, "path": str(Path(e.image_path).relative_to(root)), "captions": e.captions}
              for e in c.entries] for tag, c in splits.items()}}
    path = root / "manifest.json"
    path.write_text(json.dumps(payload, indent=1))
    return path


def load_manifest(root) -> dict[str, CaptionCorpus]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    payload = json.loads(path.read_text())
    out = {}
    for tag, rows in payload["splits"].items():
        entries = []
        for row in rows:
            p = root / row["path"]
            if not p.exists():
                raise ManifestError(f"manifest references missing image {p}")
            entries.append(CaptionEntry(row["id"], p, list(row["captions"])))
        out[tag] = CaptionCorpus(entries, tag, payload.get("name", "toy"))
    return out
