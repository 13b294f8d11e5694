"""Runnable desk-scale experiment presets.

* build_desk_corpus: a two-domain toy corpus — clean synthetic word images
  rendered online, plus a fixed pool of cluttered images standing in for real
  scene data (annotated, but weak modes never read the boxes).
* ablation_grid: the five component ablations (vanilla / +contrastive /
  +rendering / both / both-with-full-annotation) as ready TrainConfigs.
* run_desk_comparison: trains the contrastive-rendering recipe against vanilla
  reading on equal step budgets and compares held-out cluster quality and
  recognition error.
* instability_probe: observational mixed-domain text-read run that records
  loss spikes and non-finite aborts.
"""

from __future__ import annotations

import dataclasses
import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import rng as rng_mod
from .checkpoint import load_checkpoint, restore_model
from .data import ManifestEntry, sample_to_entry, save_sample_png, write_manifest
from .errors import NumericError
from .evaluation import EvalReport, collect_projections, evaluate_model, silhouette
from .model import ScobModel
from .render import RenderConfig, WordAnnotation, render_sample
from .seqcodec import Vocab
from .trainer import TrainConfig, pretrain

DESK_CHARSET = string.ascii_uppercase + string.digits + " "  # 37 symbols
_WORD_ALPHABET = string.ascii_uppercase + string.digits


def random_words(rng: np.random.Generator, min_words=2, max_words=4, min_len=2, max_len=5) -> list[str]:
    n = int(rng.integers(min_words, max_words + 1))
    words = []
    for _ in range(n):
        k = int(rng.integers(min_len, max_len + 1))
        words.append("".join(_WORD_ALPHABET[i] for i in rng.integers(0, len(_WORD_ALPHABET), size=k)))
    return words


def desk_clean_profile(image_side: int = 128) -> RenderConfig:
    return RenderConfig(
        resolution_range=(image_side, image_side),
        font_size_range=(13, 26),
        blur_max_radius=1.0,
        blur_prob=0.2,
    )


def desk_cluttered_profile(image_side: int = 128) -> RenderConfig:
    return RenderConfig(
        resolution_range=(image_side, image_side),
        font_size_range=(13, 26),
        blur_max_radius=1.2,
        blur_prob=0.3,
        clutter_rects=6,
        clutter_noise=0.01,
    )


@dataclass
class DeskCorpus:
    root: Path
    real_manifest: Path
    synthetic_manifest: Path
    eval_manifest: Path
    image_side: int


def build_desk_corpus(
    root,
    seed: int = 0,
    n_real: int = 192,
    n_synthetic: int = 192,
    n_eval: int = 48,
    image_side: int = 128,
) -> DeskCorpus:
    """Materialize the cluttered pool and the held-out split; the clean train
    pool stays word-lists-only and is rendered online during training."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cluttered = desk_cluttered_profile(image_side)
    clean = desk_clean_profile(image_side)

    real_entries = []
    for i in range(n_real):
        rng = rng_mod.stream(seed, 1, i)
        words = random_words(rng)
        sample = render_sample(words, cluttered, seed=rng_mod.child_seed(rng), domain="real")
        name = f"real_{i:05d}.png"
        save_sample_png(sample, root / "real" / name)
        entry = sample_to_entry(sample, image_name=f"real/{name}")
        real_entries.append(entry)
    real_manifest = root / "train_real.jsonl"
    write_manifest(real_manifest, real_entries)

    syn_entries = [
        ManifestEntry(
            words=[WordAnnotation(w, None) for w in random_words(rng_mod.stream(seed, 2, i))],
            domain="synthetic",
        )
        for i in range(n_synthetic)
    ]
    synthetic_manifest = root / "train_synthetic.jsonl"
    write_manifest(synthetic_manifest, syn_entries)

    eval_entries = []
    for i in range(n_eval):
        rng = rng_mod.stream(seed, 3, i)
        words = random_words(rng)
        domain = "real" if i % 2 == 0 else "synthetic"
        profile = cluttered if domain == "real" else clean
        sample = render_sample(words, profile, seed=rng_mod.child_seed(rng), domain=domain)
        name = f"eval_{i:05d}.png"
        save_sample_png(sample, root / "eval" / name)
        eval_entries.append(sample_to_entry(sample, image_name=f"eval/{name}"))
    eval_manifest = root / "eval.jsonl"
    write_manifest(eval_manifest, eval_entries)

    return DeskCorpus(root, real_manifest, synthetic_manifest, eval_manifest, image_side)


def desk_model_overrides(image_side: int = 128) -> dict:
    return {
        "image_side": image_side,
        "patch_size": 16,
        "enc_dim": 96,
        "enc_layers": 2,
        "enc_heads": 4,
        "dec_dim": 96,
        "dec_layers": 2,
        "dec_heads": 4,
        "projector_hidden": 128,
        "projector_out": 128,
    }


def desk_train_config(
    corpus: DeskCorpus,
    mode: str,
    seed: int,
    steps: int = 5000,
    out_dir: Optional[str] = None,
    members_per_step: int = 4,
) -> TrainConfig:
    """Equal-budget configs: multiview modes halve the drawn batch so every
    mode consumes the same number of images per step."""
    multiview = mode in ("supcon_only", "render_only", "scob", "scob_full_annotation")
    batch = members_per_step // 2 if multiview else members_per_step
    clean = desk_clean_profile(corpus.image_side)
    cluttered = desk_cluttered_profile(corpus.image_side)
    return TrainConfig(
        steps=steps,
        batch_size=max(1, batch),
        lr_peak=3e-4,
        warmup_fraction=0.1,
        grad_clip=1.0,
        seed=seed,
        task="ocr_read",
        mode=mode,
        word_order="random",
        manifests=[
            {"path": str(corpus.real_manifest), "ratio": 0.5},
            {"path": str(corpus.synthetic_manifest), "ratio": 0.5},
        ],
        charset=DESK_CHARSET,
        max_len=64,
        model=desk_model_overrides(corpus.image_side),
        render=dataclasses.asdict(clean),
        real_render=dataclasses.asdict(cluttered),
        checkpoint_every=0,
        out_dir=out_dir,
    )


def ablation_grid(corpus: DeskCorpus, seed: int, steps: int, out_root) -> dict[str, TrainConfig]:
    """The five component ablations, keyed A-E in the conventional order."""
    out_root = Path(out_root)
    rows = {
        "A": "vanilla",
        "B": "supcon_only",
        "C": "render_only",
        "D": "scob",
        "E": "scob_full_annotation",
    }
    return {
        key: desk_train_config(corpus, mode, seed, steps, out_dir=str(out_root / f"row_{key}"))
        for key, mode in rows.items()
    }


@dataclass
class RunOutcome:
    seed: int
    mode: str
    ned_mean: float
    silhouette_macro: Optional[float]
    checkpoint: Path
    report: EvalReport


def _evaluate_run(checkpoint_path: Path, corpus: DeskCorpus) -> EvalReport:
    from .data import read_manifest
    from .evaluation import materialize_eval_samples

    ckpt = load_checkpoint(checkpoint_path)
    vocab = Vocab(ckpt.meta["charset"])
    model = ScobModel(ckpt.model_config)
    restore_model(ckpt, model)
    entries = read_manifest(corpus.eval_manifest)
    samples = materialize_eval_samples(
        entries,
        corpus.eval_manifest.parent,
        desk_clean_profile(corpus.image_side),
        desk_cluttered_profile(corpus.image_side),
    )
    return evaluate_model(model, vocab, ckpt.meta["task"], samples)


def run_desk_mode(
    corpus: DeskCorpus, mode: str, seed: int, steps: int, out_dir, reuse: bool = True
) -> RunOutcome:
    out_dir = Path(out_dir)
    config = desk_train_config(corpus, mode, seed, steps, out_dir=str(out_dir))
    final = out_dir / "final.scob"
    if not (reuse and final.is_file()):
        result = pretrain(config, base_dir=corpus.root)
        final = result.checkpoint_path
    report = _evaluate_run(final, corpus)
    (out_dir / "eval.json").write_text(report.to_json())
    return RunOutcome(seed, mode, report.ned_mean, report.silhouette_macro, final, report)


@dataclass
class DeskComparison:
    outcomes: list[RunOutcome]
    silhouette_wins_all_seeds: bool
    ned_gap: float  # mean(scob) - mean(vanilla); positive means scob reads worse

    def summary(self) -> dict:
        return {
            "runs": [
                {
                    "seed": o.seed,
                    "mode": o.mode,
                    "ned_mean": o.ned_mean,
                    "silhouette_macro": o.silhouette_macro,
                }
                for o in self.outcomes
            ],
            "silhouette_wins_all_seeds": self.silhouette_wins_all_seeds,
            "ned_gap": self.ned_gap,
        }


def run_desk_comparison(
    work_dir,
    seeds=(0, 1, 2),
    steps: int = 5000,
    corpus: Optional[DeskCorpus] = None,
    reuse: bool = True,
) -> DeskComparison:
    work_dir = Path(work_dir)
    if corpus is None:
        corpus = build_desk_corpus(work_dir / "corpus", seed=0)
    outcomes: list[RunOutcome] = []
    for seed in seeds:
        for mode in ("vanilla", "scob"):
            out = work_dir / f"{mode}_seed{seed}"
            outcomes.append(run_desk_mode(corpus, mode, seed, steps, out, reuse=reuse))
    by_key = {(o.mode, o.seed): o for o in outcomes}
    wins = all(
        (by_key[("scob", s)].silhouette_macro or -1.0) > (by_key[("vanilla", s)].silhouette_macro or -1.0)
        for s in seeds
    )
    scob_ned = float(np.mean([by_key[("scob", s)].ned_mean for s in seeds]))
    vanilla_ned = float(np.mean([by_key[("vanilla", s)].ned_mean for s in seeds]))
    comparison = DeskComparison(outcomes, wins, scob_ned - vanilla_ned)
    (work_dir / "comparison.json").write_text(json.dumps(comparison.summary(), indent=2))
    return comparison


@dataclass
class InstabilityReport:
    steps_run: int
    spikes: int
    aborted: bool
    losses: list = field(default_factory=list)


def instability_probe(work_dir, seed: int = 0, steps: int = 300) -> InstabilityReport:
    """Mixed-domain text-read at an aggressive learning rate; observational only."""
    work_dir = Path(work_dir)
    corpus = build_desk_corpus(work_dir / "corpus", seed=seed, n_real=48, n_synthetic=48, n_eval=4)
    config = desk_train_config(corpus, "vanilla", seed, steps, out_dir=str(work_dir / "probe"))
    config = dataclasses.replace(config, task="text_read", lr_peak=3e-3, warmup_fraction=0.02)
    aborted = False
    losses: list[float] = []
    try:
        result = pretrain(config, base_dir=corpus.root)
        losses = [m.token for m in result.metrics]
    except NumericError:
        aborted = True
    spikes = 0
    for i in range(20, len(losses)):
        window = losses[i - 20 : i]
        if losses[i] > 3.0 * float(np.median(window)) + 1.0:
            spikes += 1
    return InstabilityReport(len(losses), spikes, aborted, losses)
