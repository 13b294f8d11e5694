"""Vocabulary, coordinate quantization, and read-task sequence codecs.

Two target formats are produced for the decoder:

* text-read: ``<text_read>  chars of all words joined by spaces  <eos>``
* OCR-read:  ``<ocr_read>  [per word: 4 coordinate tokens, then chars]  <eos>``

Coordinates are discretized into 1000 uniform bins per image side. In weak
mode, real-domain coordinate tokens are replaced by ``<mask>`` on the decoder
input side and their loss weights are zeroed, so a model can be trained on
real data carrying text annotations only.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError

NUM_COORD_BINS = 1000
PRINTABLE_ASCII = "".join(chr(c) for c in range(0x20, 0x7F))  # 95 symbols

PAD = "<pad>"
EOS = "<eos>"
MASK = "<mask>"
PROMPT_TEXT_READ = "<text_read>"
PROMPT_OCR_READ = "<ocr_read>"
SPECIAL_TOKENS = (PAD, EOS, MASK, PROMPT_TEXT_READ, PROMPT_OCR_READ)

_VOCAB_FILE_VERSION = 1


class Vocab:
    """Immutable token<->id maps: specials, then coordinate bins, then charset.

    The id layout is fixed: specials occupy [0, 5), coordinate tokens
    [5, 1005), and charset characters follow in the order given.
    """

    def __init__(self, charset: str = PRINTABLE_ASCII):
        if len(charset) == 0:
            raise ConfigError("charset must be non-empty")
        if len(set(charset)) != len(charset):
            raise ConfigError("charset contains duplicate characters")
        self.charset = charset
        self.pad_id = 0
        self.eos_id = 1
        self.mask_id = 2
        self.text_read_id = 3
        self.ocr_read_id = 4
        self._coord_base = len(SPECIAL_TOKENS)
        self._char_base = self._coord_base + NUM_COORD_BINS
        self._char_to_id = {c: self._char_base + i for i, c in enumerate(charset)}

    def __len__(self) -> int:
        return self._char_base + len(self.charset)

    @property
    def size(self) -> int:
        return len(self)

    def coord_id(self, bin_index: int) -> int:
        if not 0 <= bin_index < NUM_COORD_BINS:
            raise InputError(f"coordinate bin {bin_index} outside [0, {NUM_COORD_BINS})")
        return self._coord_base + bin_index

    def is_coord(self, token_id: int) -> bool:
        return self._coord_base <= token_id < self._char_base

    def coord_bin(self, token_id: int) -> int:
        if not self.is_coord(token_id):
            raise InputError(f"id {token_id} is not a coordinate token")
        return token_id - self._coord_base

    def char_id(self, ch: str) -> int:
        try:
            return self._char_to_id[ch]
        except KeyError:
            raise InputError(f"character {ch!r} is not in the charset") from None

    def is_char(self, token_id: int) -> bool:
        return self._char_base <= token_id < len(self)

    def char_of(self, token_id: int) -> str:
        if not self.is_char(token_id):
            raise InputError(f"id {token_id} is not a character token")
        return self.charset[token_id - self._char_base]

    def token(self, token_id: int) -> str:
        """Printable name of any token id."""
        if 0 <= token_id < self._coord_base:
            return SPECIAL_TOKENS[token_id]
        if self.is_coord(token_id):
            return f"<coord_{token_id - self._coord_base}>"
        if self.is_char(token_id):
            return self.charset[token_id - self._char_base]
        raise InputError(f"id {token_id} outside the vocabulary")

    # -- serialization ---------------------------------------------------

    def serialize(self) -> str:
        """Versioned text form: one token per line under section headers."""
        lines = [f"# scob vocab v{_VOCAB_FILE_VERSION}", "[special]"]
        lines.extend(SPECIAL_TOKENS)
        lines.append("[coord]")
        lines.extend(f"<coord_{i}>" for i in range(NUM_COORD_BINS))
        lines.append("[charset]")
        lines.extend(self.charset)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.serialize())

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8", newline="\n") as f:
            text = f.read()
        lines = text.split("\n")
        if not lines or not lines[0].startswith("# scob vocab v"):
            raise ConfigError(f"{path}: not a vocab file")
        version = int(lines[0].rsplit("v", 1)[1])
        if version != _VOCAB_FILE_VERSION:
            raise ConfigError(f"{path}: unsupported vocab version {version}")
        sections: dict[str, list[str]] = {}
        current = None
        for line in lines[1:]:
            if line in ("[special]", "[coord]", "[charset]"):
                current = line[1:-1]
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
        # trailing newline leaves one empty line at the end of the charset
        charset_lines = sections.get("charset", [])
        if charset_lines and charset_lines[-1] == "":
            charset_lines = charset_lines[:-1]
        if tuple(sections.get("special", ())) != SPECIAL_TOKENS:
            raise ConfigError(f"{path}: special token section mismatch")
        if len(sections.get("coord", ())) != NUM_COORD_BINS:
            raise ConfigError(f"{path}: expected {NUM_COORD_BINS} coordinate tokens")
        for ch in charset_lines:
            if len(ch) != 1:
                raise ConfigError(f"{path}: bad charset line {ch!r}")
        return cls("".join(charset_lines))

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InputError(f"degenerate box {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class TargetSequence:
    """Teacher-forcing views of one training sequence.

    All per-position lists share length N: ``input_ids[i]`` is what the decoder
    sees when it is asked to predict ``target_ids[i]``; ``loss_weights[i]`` is
    the 0/1 weight of that prediction; ``supcon_labels[i]`` is the character
    class (the character itself) where the target is a character token, else
    None; ``is_coord[i]`` marks coordinate targets.
    """

    input_ids: list[int]
    target_ids: list[int]
    loss_weights: list[float]
    supcon_labels: list[Optional[str]]
    is_coord: list[bool]

    def __len__(self) -> int:
        return len(self.target_ids)

    def __post_init__(self):
        n = len(self.target_ids)
        for name in ("input_ids", "loss_weights", "supcon_labels", "is_coord"):
            if len(getattr(self, name)) != n:
                raise InputError(f"TargetSequence field {name} length != {n}")


def quantize_coord(v: float, dim: float) -> int:
    """Map a pixel coordinate in [0, dim] to a bin in [0, 999]."""
    if dim <= 0:
        raise InputError(f"image side must be positive, got {dim}")
    if not 0 <= v <= dim:
        raise InputError(f"coordinate {v} outside [0, {dim}]")
    return min(max(int(math.floor(NUM_COORD_BINS * v / dim)), 0), NUM_COORD_BINS - 1)


def dequantize_coord(bin_index: int, dim: float) -> float:
    """Bin-center inverse of quantize_coord."""
    if not 0 <= bin_index < NUM_COORD_BINS:
        raise InputError(f"bin {bin_index} outside [0, {NUM_COORD_BINS})")
    return (bin_index + 0.5) * dim / NUM_COORD_BINS


def raster_order(words: Sequence) -> list[int]:
    """Stable top-to-bottom, left-to-right permutation by (y_min, x_min)."""
    for w in words:
        if getattr(w, "bbox", None) is None:
            raise InputError(f"word {getattr(w, 'text', w)!r} has no box; raster order needs boxes")
    return sorted(range(len(words)), key=lambda i: (words[i].bbox[1], words[i].bbox[0]))


def _check_charset(vocab: Vocab, text: str) -> None:
    for ch in text:
        if ch not in vocab._char_to_id:
            raise InputError(f"character {ch!r} is not in the charset")


def _word_permutation(words, order: str, rng) -> list[int]:
    if order == "raster":
        return raster_order(words)
    if order == "random":
        if rng is None:
            raise InputError("order='random' requires an rng stream")
        return [int(i) for i in rng.permutation(len(words))]
    if order == "manifest":
        return list(range(len(words)))
    raise InputError(f"unknown word order {order!r}")


def encode_ocr_read(
    sample,
    vocab: Vocab,
    order: str = "raster",
    weak: bool = False,
    rng=None,
    max_len: int = 512,
) -> TargetSequence:
    """Build the detection+recognition target for one sample.

    ``sample`` needs ``words`` (each with ``text`` and optionally ``bbox``),
    ``width``, ``height`` and ``domain``. Trailing whole words that do not fit
    ``max_len`` are dropped; a coordinate group is never split from its
    characters. In weak mode, real-domain samples get ``<mask>`` decoder inputs
    at coordinate slots and zero loss weight there; synthetic samples keep full
    supervision either way.
    """
    words = list(sample.words)
    mask_real = weak and sample.domain == "real"
    have_boxes = all(w.bbox is not None for w in words)
    if not have_boxes and not mask_real:
        raise InputError(
            "full supervision requires boxes on every word "
            f"(domain={sample.domain}, weak={weak})"
        )
    for w in words:
        _check_charset(vocab, w.text)

    if order == "raster" and not have_boxes:
        order = "manifest"  # weak real data cannot be box-sorted
    perm = _word_permutation(words, order, rng)

    target: list[int] = [vocab.ocr_read_id]
    masked_input: list[bool] = [False]
    weights: list[float] = [1.0]
    labels: list[Optional[str]] = [None]
    coord_flags: list[bool] = [False]

    budget = max_len - 1  # reserve EOS
    for idx in perm:
        w = words[idx]
        need = 4 + len(w.text)
        if len(target) + need > budget:
            break
        if w.bbox is not None:
            x0, y0, x1, y1 = w.bbox
            coord_ids = [
                vocab.coord_id(quantize_coord(x0, sample.width)),
                vocab.coord_id(quantize_coord(y0, sample.height)),
                vocab.coord_id(quantize_coord(x1, sample.width)),
                vocab.coord_id(quantize_coord(y1, sample.height)),
            ]
        else:
            coord_ids = [vocab.mask_id] * 4  # w=0 below; value never scored
        target.extend(coord_ids)
        masked_input.extend([mask_real] * 4)
        weights.extend([0.0 if mask_real else 1.0] * 4)
        labels.extend([None] * 4)
        coord_flags.extend([True] * 4)
        for ch in w.text:
            target.append(vocab.char_id(ch))
            masked_input.append(False)
            weights.append(1.0)
            labels.append(ch)
            coord_flags.append(False)

    target.append(vocab.eos_id)
    masked_input.append(False)
    weights.append(1.0)
    labels.append(None)
    coord_flags.append(False)

    input_ids = [vocab.pad_id]  # decoder start symbol
    for t, masked in zip(target[:-1], masked_input[:-1]):
        input_ids.append(vocab.mask_id if masked else t)
    return TargetSequence(input_ids, target, weights, labels, coord_flags)


def encode_text_read(sample, vocab: Vocab, max_len: int = 512) -> TargetSequence:
    """Build the read-everything target: words joined by spaces, raster order.

    Words without boxes keep their annotation order. All loss weights are 1
    (there are no coordinate tokens to mask).
    """
    words = list(sample.words)
    for w in words:
        _check_charset(vocab, w.text)
    if len(words) > 1:
        _check_charset(vocab, " ")
    if all(w.bbox is not None for w in words):
        perm = raster_order(words)
    else:
        perm = list(range(len(words)))

    target: list[int] = [vocab.text_read_id]
    labels: list[Optional[str]] = [None]
    budget = max_len - 1
    emitted = 0
    for idx in perm:
        text = words[idx].text
        need = len(text) + (1 if emitted else 0)
        if len(target) + need > budget:
            break
        if emitted:
            target.append(vocab.char_id(" "))
            labels.append(" ")
        for ch in text:
            target.append(vocab.char_id(ch))
            labels.append(ch)
        emitted += 1
    target.append(vocab.eos_id)
    labels.append(None)

    n = len(target)
    input_ids = [vocab.pad_id] + target[:-1]
    return TargetSequence(input_ids, target, [1.0] * n, labels, [False] * n)


@dataclass
class SkippedSpan:
    """Half-open token index range the parser discarded, with the reason."""

    start: int
    end: int
    reason: str


@dataclass
class DecodeResult:
    words: list[tuple[BBox, str]] = field(default_factory=list)
    skipped: list[SkippedSpan] = field(default_factory=list)


def decode_ocr_read(ids: Sequence[int], width: float, height: float, vocab: Vocab) -> DecodeResult:
    """Greedy parse of a generated OCR-read sequence; never raises on malformed input.

    A run of coordinate tokens opens a word when (at least) four are present —
    the last four of a longer run win; following character tokens accumulate
    until the next coordinate token, a special token, or EOS. Words with fewer
    than four coordinates or zero characters are discarded and reported.
    """
    out = DecodeResult()
    i = 0
    n = len(ids)
    # leading prompt is format, not payload
    if i < n and ids[i] in (vocab.ocr_read_id, vocab.text_read_id):
        i += 1
    while i < n:
        tid = ids[i]
        if tid == vocab.eos_id:
            break
        if not vocab.is_coord(tid):
            start = i
            while i < n and not vocab.is_coord(ids[i]) and ids[i] != vocab.eos_id:
                i += 1
            out.skipped.append(SkippedSpan(start, i, "tokens outside a word"))
            continue
        run_start = i
        while i < n and vocab.is_coord(ids[i]):
            i += 1
        run_len = i - run_start
        if run_len < 4:
            out.skipped.append(SkippedSpan(run_start, i, "coordinate run shorter than 4"))
            continue
        if run_len > 4:
            out.skipped.append(
                SkippedSpan(run_start, i - 4, "extra coordinates before a group of 4")
            )
        bins = [vocab.coord_bin(ids[j]) for j in range(i - 4, i)]
        chars_start = i
        chars: list[str] = []
        while i < n and vocab.is_char(ids[i]):
            chars.append(vocab.char_of(ids[i]))
            i += 1
        if not chars:
            out.skipped.append(SkippedSpan(chars_start - 4, chars_start, "word with no characters"))
            continue
        x0 = dequantize_coord(bins[0], width)
        y0 = dequantize_coord(bins[1], height)
        x1 = dequantize_coord(bins[2], width)
        y1 = dequantize_coord(bins[3], height)
        if x0 > x1 or y0 > y1:
            out.skipped.append(SkippedSpan(chars_start - 4, i, "inverted box coordinates"))
            continue
        out.words.append((BBox(x0, y0, x1, y1), "".join(chars)))
    return out


def sequence_arrays(seq: TargetSequence, vocab: Vocab) -> dict[str, np.ndarray]:
    """Numpy views used by the trainer; supcon labels become char token ids, -1 for none."""
    labels = np.array(
        [vocab.char_id(c) if c is not None else -1 for c in seq.supcon_labels],
        dtype=np.int64,
    )
    return {
        "input_ids": np.asarray(seq.input_ids, dtype=np.int64),
        "target_ids": np.asarray(seq.target_ids, dtype=np.int64),
        "loss_weights": np.asarray(seq.loss_weights, dtype=np.float32),
        "supcon_labels": labels,
        "is_coord": np.asarray(seq.is_coord, dtype=bool),
    }
