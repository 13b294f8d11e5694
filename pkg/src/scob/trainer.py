"""Multiview batch construction and the optimization loop.

Training modes (ablation axes, all runnable):

* ``vanilla``              - original samples only, token loss only
* ``supcon_only``          - second view by photometric augmentation, token + contrastive
* ``render_only``          - second view by rendering, weak-masked token loss only
* ``scob``                 - rendered views + weak masking + contrastive loss
* ``scob_full_annotation`` - like scob, but real coordinates fully supervised

Each step draws real samples from the manifest pools (per-pool ratios), builds
the multiview batch, evaluates the combined loss, and applies one clipped Adam
update under a linear-warmup + cosine-decay schedule. Every random draw is
keyed by (seed, step), so a resumed run continues bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import rng as rng_mod
from .checkpoint import load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from .data import SamplePool, load_pools
from .errors import ConfigError, InputError, NumericError
from .model import ModelConfig, ScobModel, image_to_tensor
from .objectives import BatchMemberLoss, LossBreakdown, LossConfig, ProjectionSet, total_loss
from .render import RenderConfig, RenderedSample, render_sample
from .seqcodec import (
    PRINTABLE_ASCII,
    TargetSequence,
    Vocab,
    encode_ocr_read,
    encode_text_read,
    sequence_arrays,
)

TASKS = ("text_read", "ocr_read")
MODES = ("vanilla", "supcon_only", "render_only", "scob", "scob_full_annotation")
WORD_ORDERS = ("raster", "random")
_MULTIVIEW_MODES = ("supcon_only", "render_only", "scob", "scob_full_annotation")
_WEAK_MODES = ("render_only", "scob")
_SUPCON_MODES = ("supcon_only", "scob", "scob_full_annotation")


def _build_dataclass(cls, overrides: dict, what: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(sorted(unknown))}")
    coerced = dict(overrides)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    return cls(**coerced)


@dataclass
class TrainConfig:
    steps: int = 100
    batch_size: int = 2  # real samples drawn per step; multiview modes add one view each
    lr_peak: float = 1e-4
    warmup_fraction: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    task: str = "ocr_read"
    mode: str = "scob"
    word_order: str = "random"
    manifests: list = field(default_factory=list)  # [{"path":..., "ratio":...}]
    charset: str = PRINTABLE_ASCII
    max_len: int = 64
    model: dict = field(default_factory=dict)  # ModelConfig overrides (vocab_size derived)
    loss: dict = field(default_factory=dict)  # LossConfig overrides
    render: dict = field(default_factory=dict)  # clean profile overrides
    real_render: dict = field(default_factory=dict)  # cluttered profile overrides
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 1
    out_dir: Optional[str] = None
    deterministic: bool = True

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.word_order not in WORD_ORDERS:
            raise ConfigError(f"word_order must be one of {WORD_ORDERS}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1]")
        if self.lr_peak <= 0:
            raise ConfigError("lr_peak must be positive")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0 (0 disables clipping)")

    def model_config(self, vocab_size: int) -> ModelConfig:
        overrides = dict(self.model)
        overrides.pop("vocab_size", None)
        overrides.setdefault("max_len", self.max_len)
        return _build_dataclass(ModelConfig, {"vocab_size": vocab_size, **overrides}, "model config")

    def loss_config(self) -> LossConfig:
        return _build_dataclass(LossConfig, self.loss, "loss config")

    def render_config(self) -> RenderConfig:
        side = self.model.get("image_side", ModelConfig.__dataclass_fields__["image_side"].default)
        overrides = {"resolution_range": (side, side), **self.render}
        return _build_dataclass(RenderConfig, overrides, "render config")

    def real_render_config(self) -> RenderConfig:
        side = self.model.get("image_side", ModelConfig.__dataclass_fields__["image_side"].default)
        overrides = {
            "resolution_range": (side, side),
            "clutter_rects": 6,
            "clutter_noise": 0.01,
            **self.real_render,
        }
        return _build_dataclass(RenderConfig, overrides, "real_render config")


@dataclass
class BatchMember:
    sample: RenderedSample
    seq: TargetSequence
    pair_index: int
    role: str  # "real" | "view"


@dataclass
class MultiviewPair:
    real: BatchMember
    view: Optional[BatchMember]


@dataclass
class MultiviewBatch:
    pairs: list[MultiviewPair]
    seeds: list[int] = field(default_factory=list)  # materialization seeds, for diagnostics

    @property
    def members(self) -> list[BatchMember]:
        out = []
        for p in self.pairs:
            out.append(p.real)
            if p.view is not None:
                out.append(p.view)
        return out


def augment_photometric(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pixel-only second view: brightness/contrast/color jitter, occasional
    grayscale, light blur. Geometry is untouched so annotations stay valid."""
    from PIL import Image, ImageFilter

    x = image.astype(np.float32)
    brightness = float(rng.uniform(0.7, 1.3))
    contrast = float(rng.uniform(0.75, 1.25))
    jitter = rng.uniform(0.85, 1.15, size=3).astype(np.float32)
    mean = x.mean()
    x = (x - mean) * contrast + mean
    x = x * brightness * jitter
    if rng.random() < 0.2:
        gray = x.mean(axis=2, keepdims=True)
        x = np.repeat(gray, 3, axis=2)
    out = np.clip(x, 0, 255).astype(np.uint8)
    blur = float(rng.uniform(0.0, 1.2))
    if rng.random() < 0.5 and blur > 0.05:
        pil = Image.fromarray(out).filter(ImageFilter.GaussianBlur(blur))
        out = np.asarray(pil)
    return out


def _encode(sample: RenderedSample, task: str, vocab: Vocab, order: str, weak: bool, rng, max_len: int) -> TargetSequence:
    if task == "text_read":
        return encode_text_read(sample, vocab, max_len=max_len)
    return encode_ocr_read(sample, vocab, order=order, weak=weak, rng=rng, max_len=max_len)


def build_multiview_batch(
    real_samples: Sequence[RenderedSample],
    vocab: Vocab,
    render_config: RenderConfig,
    mode: str,
    task: str,
    rng: np.random.Generator,
    word_order: str = "random",
    max_len: int = 64,
    seeds: Optional[list[int]] = None,
) -> MultiviewBatch:
    """Pair each drawn sample with its second view and encode both.

    The rng drives view seeds and word-order permutations; the draw sequence is
    the same for every mode so that mode ablations with equal seeds emit
    comparable batches.
    """
    if mode not in MODES:
        raise InputError(f"unknown mode {mode!r}")
    pairs: list[MultiviewPair] = []
    weak = mode in _WEAK_MODES
    for i, sample in enumerate(real_samples):
        view_seed = rng_mod.child_seed(rng)
        view_sample: Optional[RenderedSample] = None
        if mode in ("render_only", "scob", "scob_full_annotation"):
            texts = [w.text for w in sample.words]
            view_sample = render_sample(texts, render_config, view_seed, domain="synthetic")
        elif mode == "supcon_only":
            view_sample = RenderedSample(
                augment_photometric(sample.image, rng_mod.stream(view_seed)),
                list(sample.words),
                sample.domain,
                view_seed,
            )
        real_seq = _encode(sample, task, vocab, word_order, weak, rng, max_len)
        real_member = BatchMember(sample, real_seq, i, "real")
        view_member = None
        if view_sample is not None:
            view_seq = _encode(view_sample, task, vocab, word_order, weak, rng, max_len)
            view_member = BatchMember(view_sample, view_seq, i, "view")
        pairs.append(MultiviewPair(real_member, view_member))
    return MultiviewBatch(pairs, seeds=list(seeds) if seeds else [])


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to lr_peak, then cosine decay to 0 at config.steps."""
    if not 0 <= step <= config.steps:
        raise InputError(f"step {step} outside [0, {config.steps}]")
    warmup = config.warmup_fraction * config.steps
    if warmup > 0 and step <= warmup:
        return config.lr_peak * (step / warmup)
    if config.steps == warmup:
        return config.lr_peak
    progress = (step - warmup) / (config.steps - warmup)
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class StepMetrics:
    step: int
    total: float
    token: float
    supcon: float
    grad_norm: float
    lr: float
    num_members: int = 0
    num_anchors: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def batch_loss(
    model: ScobModel,
    batch: MultiviewBatch,
    loss_config: LossConfig,
    mode: str,
    vocab: Vocab,
) -> LossBreakdown:
    """Pure loss evaluation for one batch; no parameter mutation happens here."""
    members = batch.members
    if not members:
        raise InputError("empty batch")
    side = model.config.image_side
    images = torch.stack([image_to_tensor(m.sample.image, side) for m in members])
    member_arrays = [sequence_arrays(m.seq, vocab) for m in members]
    lengths = [len(m.seq) for m in members]
    max_n = max(lengths)
    pad = vocab.pad_id
    input_ids = torch.full((len(members), max_n), pad, dtype=torch.int64)
    for i, arrs in enumerate(member_arrays):
        input_ids[i, : lengths[i]] = torch.from_numpy(arrs["input_ids"])
    out = model.forward_teacher_forced(images, input_ids)

    use_supcon = mode in _SUPCON_MODES and loss_config.lam > 0
    member_losses: list[BatchMemberLoss] = []
    proj_rows: list[torch.Tensor] = []
    proj_labels: list[torch.Tensor] = []
    proj_splits: list[int] = []
    for i, arrs in enumerate(member_arrays):
        n = lengths[i]
        targets = torch.from_numpy(arrs["target_ids"])
        weights = torch.from_numpy(arrs["loss_weights"]).to(out.logits.dtype)
        entry = BatchMemberLoss(out.logits[i, :n], targets, weights)
        if use_supcon:
            labels = torch.from_numpy(arrs["supcon_labels"])
            positions = torch.nonzero(labels >= 0, as_tuple=False).squeeze(-1)
            proj_rows.append(out.hidden[i, positions])
            proj_labels.append(labels[positions])
            proj_splits.append(int(positions.numel()))
        member_losses.append(entry)

    if use_supcon and sum(proj_splits):
        z = model.project(torch.cat(proj_rows, dim=0))
        offset = 0
        for entry, count, labels in zip(member_losses, proj_splits, proj_labels):
            entry.projections = ProjectionSet(z[offset : offset + count], labels)
            offset += count
    effective = loss_config if use_supcon else dataclasses.replace(loss_config, lam=0.0)
    return total_loss(member_losses, effective)


def train_step(
    model: ScobModel,
    optimizer: torch.optim.Optimizer,
    batch: MultiviewBatch,
    loss_config: LossConfig,
    train_config: TrainConfig,
    step: int,
    vocab: Vocab,
) -> StepMetrics:
    lr = lr_at(step, train_config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    breakdown = batch_loss(model, batch, loss_config, train_config.mode, vocab)
    total = breakdown.total
    if not bool(torch.isfinite(total)):
        raise NumericError(f"non-finite loss at step {step}", batch_seeds=batch.seeds)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    pre_norm = float(torch.nn.utils.clip_grad_norm_(params, train_config.grad_clip or float("inf")))
    if not math.isfinite(pre_norm):
        raise NumericError(f"non-finite gradient at step {step}", batch_seeds=batch.seeds)
    # the scale actually applied by clip_grad_norm_, so the logged norm is post-clip
    if train_config.grad_clip > 0:
        grad_norm = pre_norm * min(1.0, train_config.grad_clip / (pre_norm + 1e-6))
    else:
        grad_norm = pre_norm
    optimizer.step()
    return StepMetrics(
        step=step,
        total=float(total.detach()),
        token=float(breakdown.token.detach()),
        supcon=float(breakdown.supcon.detach()),
        grad_norm=grad_norm,
        lr=lr,
        num_members=breakdown.num_members,
        num_anchors=breakdown.num_anchors,
    )


def draw_real_batch(
    pools: list[SamplePool],
    config: TrainConfig,
    rng: np.random.Generator,
    clean: RenderConfig,
    cluttered: RenderConfig,
) -> tuple[list[RenderedSample], list[int]]:
    ratios = np.array([p.ratio for p in pools], dtype=np.float64)
    ratios = ratios / ratios.sum()
    samples = []
    seeds = []
    for _ in range(config.batch_size):
        pool = pools[int(rng.choice(len(pools), p=ratios))]
        index = int(rng.integers(0, len(pool)))
        seed = rng_mod.child_seed(rng)
        samples.append(pool.materialize(index, clean, cluttered, seed))
        seeds.append(seed)
    return samples, seeds


def _check_full_supervision(pools: list[SamplePool], config: TrainConfig) -> None:
    needs_boxes = config.task == "ocr_read" and config.mode in ("vanilla", "supcon_only", "scob_full_annotation")
    if not needs_boxes:
        return
    for pool in pools:
        for entry in pool.entries:
            if entry.image is not None and any(w.bbox is None for w in entry.words):
                raise ConfigError(
                    f"mode={config.mode} needs boxes on every word, but manifest pool "
                    f"{pool.name!r} has a box-free word (weak modes accept such data)"
                )


@dataclass
class PretrainResult:
    checkpoint_path: Path
    metrics: list[StepMetrics]
    out_dir: Optional[Path]


def checkpoint_meta(config: TrainConfig, vocab: Vocab) -> dict:
    return {
        "charset": config.charset,
        "vocab_hash": vocab.content_hash(),
        "task": config.task,
        "mode": config.mode,
        "max_len": config.max_len,
        "loss": config.loss,
    }


def pretrain(
    config: TrainConfig,
    resume: Optional[str] = None,
    base_dir: Optional[Path] = None,
) -> PretrainResult:
    """Run (or resume) one pre-training job; returns the final checkpoint path."""
    config.validate()
    if not config.manifests:
        raise ConfigError("TrainConfig.manifests is empty")
    base_dir = Path(base_dir) if base_dir else Path.cwd()
    pools = load_pools(config.manifests, base_dir)
    _check_full_supervision(pools, config)

    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    vocab = Vocab(config.charset)
    model_cfg = config.model_config(len(vocab))
    model = ScobModel(model_cfg)
    loss_cfg = config.loss_config()
    clean = config.render_config()
    cluttered = config.real_render_config()
    # foreach stays deterministic on CPU and avoids the slow per-tensor fallback
    # that use_deterministic_algorithms() would otherwise trigger
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.lr_peak,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        foreach=True,
    )

    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if dataclasses.asdict(ckpt.model_config) != dataclasses.asdict(model_cfg):
            raise ConfigError("resume checkpoint model config does not match this run")
        if ckpt.meta.get("vocab_hash") != vocab.content_hash():
            raise ConfigError("resume checkpoint vocabulary does not match this run")
        restore_model(ckpt, model)
        restore_optimizer(ckpt, optimizer, model)
        if "torch_state_hex" in ckpt.rng:
            torch.set_rng_state(torch.tensor(bytearray.fromhex(ckpt.rng["torch_state_hex"]), dtype=torch.uint8))
        start = ckpt.step

    out_dir = Path(config.out_dir) if config.out_dir else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "a", encoding="utf-8")

    meta = checkpoint_meta(config, vocab)

    def rng_payload() -> dict:
        return {
            "root_seed": config.seed,
            "torch_state_hex": torch.get_rng_state().numpy().tobytes().hex(),
        }

    def write_ckpt(step: int, name: str) -> Path:
        target = (out_dir or base_dir) / name
        save_checkpoint(target, model, step, meta=meta, optimizer=optimizer, rng=rng_payload())
        return target

    metrics_log: list[StepMetrics] = []
    try:
        for step in range(start, config.steps):
            rng = rng_mod.stream(config.seed, step, 7)
            samples, seeds = draw_real_batch(pools, config, rng, clean, cluttered)
            batch = build_multiview_batch(
                samples,
                vocab,
                clean,
                config.mode,
                config.task,
                rng,
                word_order=config.word_order,
                max_len=config.max_len,
                seeds=seeds,
            )
            step_metrics = train_step(model, optimizer, batch, loss_cfg, config, step, vocab)
            metrics_log.append(step_metrics)
            if metrics_file is not None and step % config.log_every == 0:
                metrics_file.write(step_metrics.to_json() + "\n")
                metrics_file.flush()
            done = step + 1
            if config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.steps:
                write_ckpt(done, f"ckpt_{done:07d}.scob")
    except NumericError as e:
        if out_dir is not None:
            dump = {"step": len(metrics_log) + start, "batch_seeds": e.batch_seeds, "error": str(e)}
            (out_dir / "abort_dump.json").write_text(json.dumps(dump, indent=2))
        raise
    finally:
        if metrics_file is not None:
            metrics_file.close()

    final = write_ckpt(config.steps, "final.scob")
    return PretrainResult(final, metrics_log, out_dir)
