"""Online synthetic text rendering with word-box annotations.

Every sample is a pure function of (words, config, seed): a uniform random
background, each word pasted at a random location/size/font with a dark random
color, optional whole-image Gaussian blur, and tight per-word boxes recovered
from the glyph raster itself. A cluttered profile (random rectangles plus salt
noise) stands in for "real" scene data at desk scale.

Randomness is split into a plan step (all draws, no pixels) and a rasterize
step (pixels, no draws), so sampling statistics can be tested without paying
for rasterization.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from . import rng as rng_mod
from .errors import ConfigError, InputError

_FONT_SUFFIXES = (".ttf", ".otf")
DEFAULT_FONT_DIR = Path(__file__).parent / "fonts"

# Permanently-unassigned noncharacter; fonts render it as .notdef, which lets
# missing glyphs be recognized by raster comparison (PIL exposes no cmap).
# Default-ignorable codepoints do not work here: the shaper strips them.
_NOTDEF_PROBE = "￾"


@dataclass(frozen=True)
class RenderConfig:
    resolution_range: tuple[int, int] = (400, 768)
    bg_rgb_range: tuple[int, int] = (151, 255)
    font_dir: str = str(DEFAULT_FONT_DIR)
    font_size_range: tuple[int, int] = (12, 64)
    blur_max_radius: float = 1.8
    blur_prob: float = 0.2
    char_boxes: bool = False
    max_place_attempts: int = 40
    # dark text guarantees contrast against backgrounds >= 151
    text_rgb_range: tuple[int, int] = (0, 100)
    # cluttered profile ("real" stand-in); both default off
    clutter_rects: int = 0
    clutter_noise: float = 0.0

    def validate(self) -> None:
        lo, hi = self.resolution_range
        if lo < 32 or hi < lo:
            raise ConfigError(f"resolution_range {self.resolution_range} invalid (min side 32)")
        blo, bhi = self.bg_rgb_range
        if not (0 <= blo <= bhi <= 255):
            raise ConfigError(f"bg_rgb_range {self.bg_rgb_range} outside [0, 255]")
        tlo, thi = self.text_rgb_range
        if not (0 <= tlo <= thi <= 255):
            raise ConfigError(f"text_rgb_range {self.text_rgb_range} outside [0, 255]")
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ConfigError(f"blur_prob {self.blur_prob} outside [0, 1]")
        if self.blur_max_radius < 0:
            raise ConfigError(f"blur_max_radius {self.blur_max_radius} negative")
        flo, fhi = self.font_size_range
        if flo < 4 or fhi < flo:
            raise ConfigError(f"font_size_range {self.font_size_range} invalid")
        if self.max_place_attempts < 1:
            raise ConfigError("max_place_attempts must be >= 1")
        if self.clutter_rects < 0 or not 0.0 <= self.clutter_noise <= 1.0:
            raise ConfigError("clutter settings invalid")
        FontPool(self.font_dir)  # raises if no loadable font


@dataclass
class WordAnnotation:
    text: str
    bbox: Optional[tuple[float, float, float, float]]  # x_min, y_min, x_max, y_max
    char_boxes: Optional[list[tuple[float, float, float, float]]] = None


@dataclass
class RenderedSample:
    image: np.ndarray  # H x W x 3 uint8
    words: list[WordAnnotation]
    domain: str  # "synthetic" | "real"
    seed: int

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


@functools.lru_cache(maxsize=512)
def _load_font(path: str, size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(path, size)


@functools.lru_cache(maxsize=4096)
def _supports(path: str, size: int, ch: str) -> bool:
    font = _load_font(path, size)
    if ch.isspace():
        return font.getlength(ch) > 0
    probe = font.getmask(_NOTDEF_PROBE, mode="L")
    mask = font.getmask(ch, mode="L")
    return not (mask.size == probe.size and bytes(mask) == bytes(probe))


_POOL_CACHE: dict[str, "FontPool"] = {}


class FontPool:
    """Immutable set of font files discovered under a directory."""

    def __init__(self, font_dir: str | Path):
        root = Path(font_dir)
        if not root.is_dir():
            raise ConfigError(f"font_dir {root} is not a directory")
        self.paths = sorted(
            str(p) for p in root.rglob("*") if p.suffix.lower() in _FONT_SUFFIXES
        )
        if not self.paths:
            raise ConfigError(f"font_dir {root} contains no loadable .ttf/.otf fonts")
        for p in self.paths:
            try:
                _load_font(p, 16)
            except OSError as e:
                raise ConfigError(f"font {p} failed to load: {e}") from e

    @classmethod
    def cached(cls, font_dir: str | Path) -> "FontPool":
        key = str(Path(font_dir).resolve())
        pool = _POOL_CACHE.get(key)
        if pool is None:
            pool = _POOL_CACHE[key] = cls(font_dir)
        return pool

    def __len__(self) -> int:
        return len(self.paths)

    def get(self, index: int, size: int) -> ImageFont.FreeTypeFont:
        return _load_font(self.paths[index], size)

    def covers(self, index: int, size: int, text: str) -> bool:
        return all(_supports(self.paths[index], size, ch) for ch in set(text))


def missing_codepoints(font: ImageFont.FreeTypeFont, text: str) -> list[str]:
    path, size = font.path, font.size
    return sorted({ch for ch in text if not _supports(path, size, ch)})


def glyph_extent(text: str, font, size: int) -> tuple[int, int]:
    """Advance width and ink height, in pixels, of ``text`` at ``size`` points.

    ``font`` may be a font file path or a loaded PIL font (re-sized as needed).
    """
    if not text:
        raise InputError("glyph_extent requires non-empty text")
    if size <= 0:
        raise InputError(f"font size must be positive, got {size}")
    if isinstance(font, (str, Path)):
        face = _load_font(str(font), int(size))
    else:
        face = font if font.size == size else font.font_variant(size=int(size))
    missing = missing_codepoints(face, text)
    if missing:
        raise InputError(
            "font %s lacks glyphs for: %s" % (face.path, ", ".join(repr(c) for c in missing))
        )
    width = max(1, int(np.ceil(face.getlength(text))))
    bbox = face.getbbox(text)
    height = max(1, int(bbox[3] - bbox[1]))
    return width, height


@dataclass
class _Placement:
    text: str
    font_index: int
    size: int
    color: tuple[int, int, int]
    paste_xy: tuple[int, int]
    mask_region: tuple[int, int, int, int]  # paste rectangle, used for overlap tests
    bbox: tuple[int, int, int, int]  # tight ink box in image coordinates
    char_boxes: Optional[list[tuple[int, int, int, int]]] = None


@dataclass
class _Rect:
    xy: tuple[int, int, int, int]
    color: tuple[int, int, int]


@dataclass
class RenderPlan:
    width: int
    height: int
    background: tuple[int, int, int]
    blur_radius: float
    blur_applied: bool
    clutter_rects: list[_Rect] = field(default_factory=list)
    noise_seed: Optional[int] = None
    noise_fraction: float = 0.0
    placements: list[_Placement] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)


def _tight_local_bbox(mask_img: Image.Image, color, background) -> Optional[tuple[int, int, int, int]]:
    """Exact ink box: composite over a plain-background tile and scan for changes."""
    tile = Image.new("RGB", mask_img.size, background)
    tile.paste(color, (0, 0), mask_img)
    arr = np.asarray(tile)
    changed = (arr != np.asarray(background, dtype=np.uint8)).any(axis=2)
    ys, xs = np.nonzero(changed)
    if xs.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _glyph_mask(font: ImageFont.FreeTypeFont, text: str) -> Optional[Image.Image]:
    mask = font.getmask(text, mode="L")
    if mask.size[0] == 0 or mask.size[1] == 0:
        return None
    return Image.frombytes("L", mask.size, bytes(mask))


def _regions_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _char_boxes(font, text, mask_origin, paste_xy, background, color):
    """Approximate per-character ink boxes from per-glyph masks at advance offsets."""
    boxes = []
    advance = 0.0
    for ch in text:
        cmask = _glyph_mask(font, ch)
        if cmask is None:
            advance += font.getlength(ch)
            boxes.append(None)
            continue
        local = _tight_local_bbox(cmask, color, background)
        cb = font.getbbox(ch)
        if local is None:
            boxes.append(None)
        else:
            # glyph mask origin sits at (bbox_x0, bbox_y0) of the char
            x0 = paste_xy[0] + int(round(advance)) + cb[0] - mask_origin[0] + local[0]
            y0 = paste_xy[1] + cb[1] - mask_origin[1] + local[1]
            boxes.append((x0, y0, x0 + (local[2] - local[0]), y0 + (local[3] - local[1])))
        advance += font.getlength(ch)
    return boxes


def _validate_words(words: Sequence[str]) -> None:
    from .seqcodec import PRINTABLE_ASCII

    for w in words:
        if not w:
            raise InputError("words must be non-empty strings")
        for ch in w:
            if ch.isspace():
                raise InputError(f"word {w!r} contains whitespace character {ch!r}")
            if ch not in PRINTABLE_ASCII:
                raise InputError(f"word {w!r} contains out-of-charset character {ch!r}")


def plan_sample(words: Sequence[str], config: RenderConfig, seed: int) -> RenderPlan:
    """Draw every random choice for one sample; deterministic in (words, config, seed)."""
    _validate_words(words)
    pool = FontPool.cached(config.font_dir)
    rng = rng_mod.stream(seed)

    lo, hi = config.resolution_range
    width = int(rng.integers(lo, hi + 1))
    height = int(rng.integers(lo, hi + 1))
    blo, bhi = config.bg_rgb_range
    background = tuple(int(v) for v in rng.integers(blo, bhi + 1, size=3))

    # both draws always happen so the stream does not depend on blur settings
    blur_u = float(rng.random())
    blur_radius = float(rng.uniform(0.0, config.blur_max_radius))
    blur_applied = blur_u < config.blur_prob and blur_radius > 0.0

    plan = RenderPlan(width, height, background, blur_radius, blur_applied)

    for _ in range(config.clutter_rects):
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        x0 = int(rng.integers(0, width))
        y0 = int(rng.integers(0, height))
        x1 = int(rng.integers(x0, width)) + 1
        y1 = int(rng.integers(y0, height)) + 1
        plan.clutter_rects.append(_Rect((x0, y0, x1, y1), color))
    if config.clutter_noise > 0.0:
        plan.noise_seed = rng_mod.child_seed(rng)
        plan.noise_fraction = config.clutter_noise

    flo, fhi = config.font_size_range
    tlo, thi = config.text_rgb_range
    for word in words:
        placed = None
        for _ in range(config.max_place_attempts):
            font_index = int(rng.integers(0, len(pool)))
            size = int(rng.integers(flo, fhi + 1))
            color = tuple(int(v) for v in rng.integers(tlo, thi + 1, size=3))
            x = int(rng.integers(0, width))
            y = int(rng.integers(0, height))
            if not pool.covers(font_index, size, word):
                continue
            font = pool.get(font_index, size)
            mask = _glyph_mask(font, word)
            if mask is None:
                continue
            mw, mh = mask.size
            if x + mw > width or y + mh > height:
                continue
            region = (x, y, x + mw, y + mh)
            if any(_regions_overlap(region, p.mask_region) for p in plan.placements):
                continue
            local = _tight_local_bbox(mask, color, background)
            if local is None:
                continue
            bbox = (x + local[0], y + local[1], x + local[2], y + local[3])
            char_boxes = None
            if config.char_boxes:
                wb = font.getbbox(word)
                char_boxes = [
                    b
                    for b in _char_boxes(font, word, (wb[0], wb[1]), (x, y), background, color)
                    if b is not None
                ]
            placed = _Placement(word, font_index, size, color, (x, y), region, bbox, char_boxes)
            break
        if placed is None:
            plan.dropped.append(word)
        else:
            plan.placements.append(placed)
    return plan


def rasterize(plan: RenderPlan, config: RenderConfig, seed: int, domain: str = "synthetic") -> RenderedSample:
    pool = FontPool.cached(config.font_dir)
    img = Image.new("RGB", (plan.width, plan.height), plan.background)
    if plan.clutter_rects:
        draw = ImageDraw.Draw(img)
        for rect in plan.clutter_rects:
            draw.rectangle((rect.xy[0], rect.xy[1], rect.xy[2] - 1, rect.xy[3] - 1), fill=rect.color)
    if plan.noise_seed is not None and plan.noise_fraction > 0.0:
        noise_rng = rng_mod.stream(plan.noise_seed)
        arr = np.asarray(img).copy()
        mask = noise_rng.random((plan.height, plan.width)) < plan.noise_fraction
        arr[mask] = noise_rng.integers(0, 256, size=(int(mask.sum()), 3), dtype=np.uint8)
        img = Image.fromarray(arr)
    for p in plan.placements:
        font = pool.get(p.font_index, p.size)
        mask = _glyph_mask(font, p.text)
        img.paste(p.color, p.paste_xy, mask)
    if plan.blur_applied:
        img = img.filter(ImageFilter.GaussianBlur(plan.blur_radius))
    words = [
        WordAnnotation(
            p.text,
            tuple(float(v) for v in p.bbox),
            [tuple(float(v) for v in b) for b in p.char_boxes] if p.char_boxes else None,
        )
        for p in plan.placements
    ]
    return RenderedSample(np.asarray(img), words, domain, seed)


def render_sample(
    words: Sequence[str], config: RenderConfig, seed: int, domain: str = "synthetic"
) -> RenderedSample:
    """Render one annotated sample; byte-deterministic in (words, config, seed)."""
    plan = plan_sample(words, config, seed)
    return rasterize(plan, config, seed, domain=domain)


@dataclass
class RenderStats:
    samples_per_sec: float
    bytes_per_sec: float
    load_samples_per_sec: Optional[float] = None
    samples: int = 0
    seconds: float = 0.0


_BENCH_CHARS = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"


def _bench_words(rng: np.random.Generator) -> list[str]:
    n = int(rng.integers(2, 7))
    out = []
    for _ in range(n):
        k = int(rng.integers(2, 9))
        out.append("".join(_BENCH_CHARS[i] for i in rng.integers(0, len(_BENCH_CHARS), size=k)))
    return out


def bench_render(
    config: RenderConfig, n: int, comparison_dir: Optional[str] = None, base_seed: int = 0
) -> RenderStats:
    """Measure rendering throughput; optionally compare with decode-from-disk speed."""
    if n < 1:
        raise InputError("bench_render needs n >= 1")
    config.validate()
    total_bytes = 0
    t0 = time.perf_counter()
    for i in range(n):
        words = _bench_words(rng_mod.stream(base_seed, i, 1))
        sample = render_sample(words, config, seed=rng_mod.child_seed(rng_mod.stream(base_seed, i, 2)))
        total_bytes += sample.image.nbytes
    elapsed = max(time.perf_counter() - t0, 1e-9)
    stats = RenderStats(
        samples_per_sec=n / elapsed,
        bytes_per_sec=total_bytes / elapsed,
        samples=n,
        seconds=elapsed,
    )
    if comparison_dir is not None:
        root = Path(comparison_dir)
        files = sorted(
            p for p in root.rglob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
        if not files:
            raise InputError(f"comparison_dir {root} contains no decodable images")
        t0 = time.perf_counter()
        for p in files:
            with Image.open(p) as im:
                np.asarray(im.convert("RGB"))
        stats.load_samples_per_sec = len(files) / max(time.perf_counter() - t0, 1e-9)
    return stats
