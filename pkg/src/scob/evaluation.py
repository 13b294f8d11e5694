"""Recognition, detection, and embedding-cluster metrics.

* ned: normalized edit distance, Levenshtein over the longer length.
* e2e_f1: greedy IoU matching with exact-text true positives.
* silhouette: per-class and macro cluster quality of unit-norm projections,
  the quantitative stand-in for eyeballing embedding plots.
* dump_embeddings: teacher-forced projection dump for offline visualization.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ManifestEntry, load_entry_image
from .errors import InputError
from .model import ScobModel, image_to_tensor
from .render import RenderConfig, RenderedSample, render_sample
from .seqcodec import (
    BBox,
    Vocab,
    decode_ocr_read,
    encode_ocr_read,
    encode_text_read,
    raster_order,
    sequence_arrays,
)


def levenshtein(a: str, b: str) -> int:
    """Classic two-row edit distance."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ned(pred: str, gt: str) -> float:
    """Levenshtein(pred, gt) / max(len); 0 when both strings are empty."""
    longest = max(len(pred), len(gt))
    if longest == 0:
        return 0.0
    return levenshtein(pred, gt) / longest


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a.as_tuple() if isinstance(a, BBox) else a
    bx0, by0, bx1, by1 = b.as_tuple() if isinstance(b, BBox) else b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    if ix0 >= ix1 or iy0 >= iy1:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class E2EScore:
    precision: float
    recall: float
    f1: float
    true_positives: int = 0
    num_preds: int = 0
    num_gts: int = 0


def e2e_f1(
    preds: Sequence[tuple], gts: Sequence[tuple], iou_threshold: float = 0.5
) -> E2EScore:
    """Greedy one-to-one matching by descending IoU; a true positive needs
    IoU >= threshold and exact text equality. Tie-breaks use only box/text
    content, so the score is invariant to input order."""

    def norm(item):
        box, text = item
        return (box.as_tuple() if isinstance(box, BBox) else tuple(float(v) for v in box), text)

    p = [norm(x) for x in preds]
    g = [norm(x) for x in gts]
    candidates = []
    for i, (pb, pt) in enumerate(p):
        for j, (gb, gt_text) in enumerate(g):
            overlap = iou(pb, gb)
            if overlap >= iou_threshold:
                candidates.append((-overlap, 0 if pt == gt_text else 1, pb, gb, pt, gt_text, i, j))
    candidates.sort(key=lambda c: c[:6])
    matched_p: set[int] = set()
    matched_g: set[int] = set()
    tp = 0
    for neg_iou, mismatch, *_rest, i, j in candidates:
        if i in matched_p or j in matched_g:
            continue
        matched_p.add(i)
        matched_g.add(j)
        if mismatch == 0:
            tp += 1
    precision = tp / len(p) if p else 0.0
    recall = tp / len(g) if g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return E2EScore(precision, recall, f1, tp, len(p), len(g))


@dataclass
class SilhouetteResult:
    by_class: dict
    macro: Optional[float]
    excluded: list = field(default_factory=list)


def silhouette(z: np.ndarray, labels: Sequence) -> SilhouetteResult:
    """Mean silhouette per class plus the macro average.

    Euclidean distances; s(i) = (b-a)/max(a,b) with the 0/0 case defined as 0.
    Classes with fewer than two members are excluded with a warning.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = list(labels)
    if z.ndim != 2 or len(labels) != z.shape[0]:
        raise InputError("silhouette needs z of shape (n, d) with n labels")
    classes: dict = {}
    for i, lab in enumerate(labels):
        classes.setdefault(lab, []).append(i)
    excluded = sorted((lab for lab, idx in classes.items() if len(idx) < 2), key=repr)
    if excluded:
        warnings.warn(f"silhouette excluded degenerate classes: {excluded}", stacklevel=2)
    valid = {lab: np.array(idx) for lab, idx in classes.items() if len(idx) >= 2}
    if len(valid) < 2:
        raise InputError("silhouette needs at least 2 classes with >= 2 members")

    keep = np.concatenate([idx for idx in valid.values()])
    keep.sort()
    zk = z[keep]
    lk = [labels[i] for i in keep]
    diff = zk[:, None, :] - zk[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    masks = {lab: np.array([l == lab for l in lk]) for lab in valid}
    scores: dict = {lab: [] for lab in valid}
    for i in range(len(zk)):
        own = masks[lk[i]].copy()
        own[i] = False
        a = dist[i, own].mean()
        b = min(dist[i, masks[lab]].mean() for lab in valid if lab != lk[i])
        denom = max(a, b)
        s = 0.0 if denom == 0.0 else (b - a) / denom
        scores[lk[i]].append(s)
    by_class = {lab: float(np.mean(vals)) for lab, vals in scores.items()}
    macro = float(np.mean(list(by_class.values())))
    return SilhouetteResult(by_class, macro, excluded)


@dataclass
class EvalReport:
    ned_mean: float
    e2e_precision: float
    e2e_recall: float
    e2e_f1: float
    silhouette_by_class: dict
    silhouette_macro: Optional[float]
    sample_count: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


def _gt_reading(sample: RenderedSample) -> str:
    words = list(sample.words)
    if words and all(w.bbox is not None for w in words):
        perm = raster_order(words)
    else:
        perm = list(range(len(words)))
    return " ".join(words[i].text for i in perm)


def _pred_reading(pred_words: list[tuple[BBox, str]]) -> str:
    ordered = sorted(pred_words, key=lambda bt: (bt[0].y_min, bt[0].x_min))
    return " ".join(t for _b, t in ordered)


def predict_sample(model: ScobModel, vocab: Vocab, task: str, sample: RenderedSample):
    """Greedy generation for one sample: (prediction string, pred (box, text) list)."""
    image = image_to_tensor(sample.image, model.config.image_side)
    prompt = vocab.ocr_read_id if task == "ocr_read" else vocab.text_read_id
    ids = model.generate(image, prompt, max_len=model.config.max_len, start_id=vocab.pad_id, eos_id=vocab.eos_id)
    if task == "text_read":
        chars = [vocab.char_of(t) for t in ids if vocab.is_char(t)]
        return "".join(chars), []
    decoded = decode_ocr_read(ids, sample.width, sample.height, vocab)
    return _pred_reading(decoded.words), decoded.words


def _probe_sequence(sample: RenderedSample, vocab: Vocab, task: str, max_len: int):
    """Teacher-forcing input for embedding probes: identical regardless of how
    the model was trained (full coordinates when boxes exist, masks otherwise),
    so probes of different training modes stay comparable."""
    if task == "text_read":
        return encode_text_read(sample, vocab, max_len=max_len)
    weak = any(w.bbox is None for w in sample.words)
    return encode_ocr_read(sample, vocab, order="raster", weak=weak, max_len=max_len)


def collect_projections(
    model: ScobModel, vocab: Vocab, task: str, samples: Sequence[RenderedSample]
) -> tuple[np.ndarray, list[str]]:
    """Teacher-forced projections at character positions, pooled over samples."""
    zs: list[np.ndarray] = []
    labels: list[str] = []
    with torch.no_grad():
        for sample in samples:
            seq = _probe_sequence(sample, vocab, task, model.config.max_len)
            arrs = sequence_arrays(seq, vocab)
            image = image_to_tensor(sample.image, model.config.image_side).unsqueeze(0)
            ids = torch.from_numpy(arrs["input_ids"]).unsqueeze(0)
            out = model.forward_teacher_forced(image, ids)
            positions = np.nonzero(arrs["supcon_labels"] >= 0)[0]
            if positions.size == 0:
                continue
            z = model.project(out.hidden[0, torch.from_numpy(positions)])
            zs.append(z.numpy())
            labels.extend(vocab.char_of(int(t)) for t in arrs["supcon_labels"][positions])
    if not zs:
        return np.zeros((0, model.config.projector_out)), []
    return np.concatenate(zs, axis=0), labels


def evaluate_model(
    model: ScobModel,
    vocab: Vocab,
    task: str,
    samples: Sequence[RenderedSample],
    iou_threshold: float = 0.5,
    config_echo: Optional[dict] = None,
) -> EvalReport:
    model.eval()
    neds: list[float] = []
    tp = np_preds = np_gts = 0
    for sample in samples:
        pred_str, pred_words = predict_sample(model, vocab, task, sample)
        neds.append(ned(pred_str, _gt_reading(sample)))
        if task == "ocr_read" and sample.words and all(w.bbox is not None for w in sample.words):
            gts = [(BBox(*w.bbox), w.text) for w in sample.words]
            score = e2e_f1(pred_words, gts, iou_threshold)
            tp += score.true_positives
            np_preds += score.num_preds
            np_gts += score.num_gts
    precision = tp / np_preds if np_preds else 0.0
    recall = tp / np_gts if np_gts else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0

    sil_by_class: dict = {}
    sil_macro: Optional[float] = None
    if samples:
        z, labels = collect_projections(model, vocab, task, samples)
        try:
            result = silhouette(z, labels)
            sil_by_class = result.by_class
            sil_macro = result.macro
        except InputError:
            pass  # too few classes on this split; report null
    return EvalReport(
        ned_mean=float(np.mean(neds)) if neds else 0.0,
        e2e_precision=precision,
        e2e_recall=recall,
        e2e_f1=f1,
        silhouette_by_class=sil_by_class,
        silhouette_macro=sil_macro,
        sample_count=len(samples),
        config=config_echo or {},
    )


def materialize_eval_samples(
    entries: Sequence[ManifestEntry],
    manifest_dir: Path,
    clean: RenderConfig,
    cluttered: RenderConfig,
) -> list[RenderedSample]:
    """Deterministic pixels for an eval manifest: disk images as-is, image-free
    entries rendered from their recorded seed (or line index)."""
    samples = []
    for i, entry in enumerate(entries):
        if entry.image is not None:
            samples.append(
                RenderedSample(load_entry_image(entry, manifest_dir), list(entry.words), entry.domain, entry.seed or 0)
            )
        else:
            profile = clean if entry.domain == "synthetic" else cluttered
            seed = entry.seed if entry.seed is not None else i
            samples.append(render_sample(entry.texts, profile, seed, domain=entry.domain))
    return samples


def dump_embeddings(
    model: ScobModel,
    vocab: Vocab,
    task: str,
    samples: Sequence[RenderedSample],
    out_path,
) -> int:
    """Write one TSV row per character position: sample id, position, label, z.

    Returns the number of rows written. Output is deterministic for a fixed
    checkpoint and sample list.
    """
    model.eval()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dim = model.config.projector_out
    rows = 0
    with torch.no_grad(), open(out_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("sample\tposition\tlabel\t" + "\t".join(f"z{i}" for i in range(dim)) + "\n")
        for sid, sample in enumerate(samples):
            seq = _probe_sequence(sample, vocab, task, model.config.max_len)
            arrs = sequence_arrays(seq, vocab)
            image = image_to_tensor(sample.image, model.config.image_side).unsqueeze(0)
            ids = torch.from_numpy(arrs["input_ids"]).unsqueeze(0)
            out = model.forward_teacher_forced(image, ids)
            positions = np.nonzero(arrs["supcon_labels"] >= 0)[0]
            if positions.size == 0:
                continue
            z = model.project(out.hidden[0, torch.from_numpy(positions)]).numpy()
            for row, pos in enumerate(positions):
                label = vocab.char_of(int(arrs["supcon_labels"][pos]))
                values = "\t".join(repr(float(v)) for v in z[row])
                f.write(f"{sid}\t{int(pos)}\t{label}\t{values}\n")
                rows += 1
    return rows
