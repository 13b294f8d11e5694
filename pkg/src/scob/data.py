"""Dataset manifests and sample materialization.

A manifest is JSON Lines, one sample per line:

    {"image": "path.png"?, "words": [{"text": str, "bbox": [x0,y0,x1,y1]?}, ...],
     "domain": "synthetic"|"real", "seed": int?, "width": int?, "height": int?}

Lines without an image path describe on-the-fly samples: the trainer renders
them at batch-construction time (clean profile for synthetic, cluttered profile
for real). Lines with an image path are loaded from disk as-is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, InputError
from .render import RenderConfig, RenderedSample, WordAnnotation, render_sample

DOMAINS = ("synthetic", "real")


@dataclass
class ManifestEntry:
    words: list[WordAnnotation]
    domain: str
    image: Optional[str] = None  # path relative to the manifest file
    seed: Optional[int] = None
    width: Optional[int] = None
    height: Optional[int] = None

    @property
    def texts(self) -> list[str]:
        return [w.text for w in self.words]


def _entry_from_json(obj: dict, line_no: int, path: Path) -> ManifestEntry:
    try:
        domain = obj["domain"]
        if domain not in DOMAINS:
            raise InputError(f"{path}:{line_no}: unknown domain {domain!r}")
        words = []
        for w in obj["words"]:
            bbox = tuple(float(v) for v in w["bbox"]) if w.get("bbox") is not None else None
            char_boxes = (
                [tuple(float(v) for v in b) for b in w["char_boxes"]]
                if w.get("char_boxes")
                else None
            )
            words.append(WordAnnotation(str(w["text"]), bbox, char_boxes))
        return ManifestEntry(
            words=words,
            domain=domain,
            image=obj.get("image"),
            seed=obj.get("seed"),
            width=obj.get("width"),
            height=obj.get("height"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{path}:{line_no}: malformed manifest line ({e})") from e


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest {path} does not exist")
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            entries.append(_entry_from_json(json.loads(line), i, path))
    return entries


def entry_to_json(entry: ManifestEntry) -> dict:
    words = []
    for w in entry.words:
        obj: dict = {"text": w.text}
        if w.bbox is not None:
            obj["bbox"] = [float(v) for v in w.bbox]
        if w.char_boxes:
            obj["char_boxes"] = [[float(v) for v in b] for b in w.char_boxes]
        words.append(obj)
    out: dict = {"words": words, "domain": entry.domain}
    if entry.image is not None:
        out["image"] = entry.image
    if entry.seed is not None:
        out["seed"] = int(entry.seed)
    if entry.width is not None:
        out["width"] = int(entry.width)
    if entry.height is not None:
        out["height"] = int(entry.height)
    return out


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            f.write(json.dumps(entry_to_json(e), sort_keys=True) + "\n")


def sample_to_entry(sample: RenderedSample, image_name: Optional[str] = None) -> ManifestEntry:
    return ManifestEntry(
        words=list(sample.words),
        domain=sample.domain,
        image=image_name,
        seed=sample.seed,
        width=sample.width,
        height=sample.height,
    )


def save_sample_png(sample: RenderedSample, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.image).save(path, format="PNG")


def load_entry_image(entry: ManifestEntry, manifest_dir: Path) -> np.ndarray:
    img_path = manifest_dir / entry.image
    if not img_path.is_file():
        raise InputError(f"sample image {img_path} does not exist")
    with Image.open(img_path) as im:
        return np.asarray(im.convert("RGB"))


@dataclass
class SamplePool:
    """One manifest loaded into memory, with a draw ratio for batch mixing."""

    entries: list[ManifestEntry]
    ratio: float
    manifest_dir: Path
    name: str = ""
    _image_cache: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def materialize(
        self,
        index: int,
        clean: RenderConfig,
        cluttered: RenderConfig,
        seed: int,
    ) -> RenderedSample:
        """Turn one manifest entry into pixels.

        Disk-backed entries load (and cache) their image and keep manifest
        annotations verbatim; image-free entries are rendered fresh with the
        profile matching their domain, and the renderer's own annotations
        (including boxes) replace any stale manifest boxes.
        """
        entry = self.entries[index]
        if entry.image is not None:
            if index not in self._image_cache:
                self._image_cache[index] = load_entry_image(entry, self.manifest_dir)
            return RenderedSample(
                self._image_cache[index], list(entry.words), entry.domain, entry.seed or 0
            )
        profile = clean if entry.domain == "synthetic" else cluttered
        return render_sample(entry.texts, profile, seed, domain=entry.domain)


def load_pools(manifests: list[dict], base_dir: Path) -> list[SamplePool]:
    """manifests: [{"path": str, "ratio": float}, ...]; ratios must sum to 1."""
    if not manifests:
        raise ConfigError("at least one dataset manifest is required")
    pools = []
    total = 0.0
    for spec in manifests:
        try:
            path = Path(spec["path"])
            ratio = float(spec.get("ratio", 1.0 / len(manifests)))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed manifest spec {spec!r}") from e
        if not path.is_absolute():
            path = base_dir / path
        entries = read_manifest(path)
        if not entries:
            raise ConfigError(f"manifest {path} is empty")
        pools.append(SamplePool(entries, ratio, path.parent, name=path.stem))
        total += ratio
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"manifest ratios sum to {total}, expected 1.0")
    return pools
