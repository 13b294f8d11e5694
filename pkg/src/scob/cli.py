"""Command-line entry point.

Subcommands: render, pretrain, eval, bench-render, dump-embeddings.
Exit codes: 0 ok, 1 I/O error, 2 config/validation error, 3 numeric abort.
Config precedence: CLI flag > config file > built-in default; unknown config
keys are hard errors. Every run directory receives exactly one run_manifest.json
with the resolved configuration snapshot. SCOB_THREADS caps torch threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__
from . import rng as rng_mod
from .errors import ConfigError, InputError, NumericError

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_json_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return obj


def _write_run_manifest(out_dir: Optional[Path], payload: dict) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    os.replace(tmp, out_dir / "run_manifest.json")


def _manifest_payload(command: str, config: dict, seeds, vocab_hash: Optional[str]) -> dict:
    return {
        "command": command,
        "config": config,
        "vocab_hash": vocab_hash,
        "seeds": seeds,
        "started_at": None,
        "finished_at": None,
        "exit_status": None,
        "version": __version__,
    }


def _field_help(cls) -> str:
    names = ", ".join(f.name for f in dataclasses.fields(cls))
    return f"config file keys for {cls.__name__}: {names}"


def cmd_render(args) -> int:
    from .data import sample_to_entry, save_sample_png, write_manifest
    from .render import RenderConfig, render_sample
    from .seqcodec import Vocab
    from .trainer import _build_dataclass

    overrides = _load_json_config(args.config)
    config = _build_dataclass(RenderConfig, overrides, "render config")
    config.validate()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = _manifest_payload(
        "render", dataclasses.asdict(config), [args.seed], Vocab().content_hash()
    )
    payload["started_at"] = time.time()
    status = EXIT_OK
    try:
        entries = []
        from .experiments import random_words

        for i in range(args.count):
            rng = rng_mod.stream(args.seed, i)
            words = args.words.split(",") if args.words else random_words(rng)
            sample = render_sample(
                words, config, seed=rng_mod.child_seed(rng), domain=args.domain
            )
            name = f"sample_{i:05d}.png"
            save_sample_png(sample, out_dir / name)
            entries.append(sample_to_entry(sample, image_name=name))
        write_manifest(out_dir / "manifest.jsonl", entries)
        print(f"wrote {len(entries)} samples to {out_dir}")
        return status
    except (ConfigError, InputError):
        status = EXIT_CONFIG
        raise
    except OSError:
        status = EXIT_IO
        raise
    finally:
        payload["finished_at"] = time.time()
        payload["exit_status"] = status
        _write_run_manifest(out_dir, payload)


def cmd_pretrain(args) -> int:
    from .seqcodec import Vocab
    from .trainer import TrainConfig, _build_dataclass, pretrain

    file_config = _load_json_config(args.config)
    cli_overrides = {
        key: value
        for key, value in (
            ("steps", args.steps),
            ("mode", args.mode),
            ("task", args.task),
            ("seed", args.seed),
            ("batch_size", args.batch_size),
            ("lr_peak", args.lr_peak),
            ("out_dir", args.out),
            ("word_order", args.word_order),
        )
        if value is not None
    }
    config = _build_dataclass(TrainConfig, {**file_config, **cli_overrides}, "train config")
    config.validate()
    if not config.manifests:
        raise ConfigError("train config needs at least one dataset manifest")
    out_dir = Path(config.out_dir) if config.out_dir else None
    vocab_hash = Vocab(config.charset).content_hash()
    payload = _manifest_payload("pretrain", dataclasses.asdict(config), [config.seed], vocab_hash)
    payload["started_at"] = time.time()
    status = EXIT_OK
    try:
        base = Path(args.config).parent if args.config else Path.cwd()
        result = pretrain(config, resume=args.resume, base_dir=base)
        print(f"finished at step {config.steps}; checkpoint: {result.checkpoint_path}")
        return status
    except NumericError:
        status = EXIT_NUMERIC
        raise
    except (ConfigError, InputError):
        status = EXIT_CONFIG
        raise
    except OSError:
        status = EXIT_IO
        raise
    finally:
        payload["finished_at"] = time.time()
        payload["exit_status"] = status
        _write_run_manifest(out_dir, payload)


def _load_model(checkpoint_path: str):
    from .checkpoint import load_checkpoint, restore_model
    from .model import ScobModel
    from .seqcodec import Vocab

    ckpt = load_checkpoint(checkpoint_path)
    charset = ckpt.meta.get("charset")
    stored_hash = ckpt.meta.get("vocab_hash")
    if charset is None or stored_hash is None:
        raise ConfigError(f"{checkpoint_path}: checkpoint lacks vocabulary metadata")
    vocab = Vocab(charset)
    if vocab.content_hash() != stored_hash:
        raise ConfigError(
            f"{checkpoint_path}: vocabulary hash mismatch "
            f"(stored {stored_hash[:12]}, rebuilt {vocab.content_hash()[:12]})"
        )
    model = ScobModel(ckpt.model_config)
    restore_model(ckpt, model)
    model.eval()
    return ckpt, model, vocab


def _eval_samples(ckpt, manifest_path: str):
    from .data import read_manifest
    from .evaluation import materialize_eval_samples
    from .render import RenderConfig

    entries = read_manifest(manifest_path)
    side = ckpt.model_config.image_side
    clean = RenderConfig(resolution_range=(side, side))
    cluttered = RenderConfig(resolution_range=(side, side), clutter_rects=6, clutter_noise=0.01)
    return materialize_eval_samples(entries, Path(manifest_path).parent, clean, cluttered)


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model

    ckpt, model, vocab = _load_model(args.checkpoint)
    samples = _eval_samples(ckpt, args.manifest)
    report = evaluate_model(
        model,
        vocab,
        ckpt.meta.get("task", "ocr_read"),
        samples,
        config_echo={"checkpoint": args.checkpoint, "manifest": args.manifest},
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    payload = _manifest_payload(
        "eval", {"checkpoint": args.checkpoint, "manifest": args.manifest}, [], vocab.content_hash()
    )
    payload["started_at"] = payload["finished_at"] = time.time()
    payload["exit_status"] = EXIT_OK
    _write_run_manifest(out.parent, payload)
    print(report.to_json())
    return EXIT_OK


def cmd_bench_render(args) -> int:
    from .render import RenderConfig, bench_render
    from .trainer import _build_dataclass

    overrides = _load_json_config(args.config)
    config = _build_dataclass(RenderConfig, overrides, "render config")
    config.validate()
    stats = bench_render(config, args.n, comparison_dir=args.compare_dir, base_seed=args.seed)
    line = json.dumps(dataclasses.asdict(stats), sort_keys=True)
    print(line)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bench.json").write_text(line)
        payload = _manifest_payload("bench-render", dataclasses.asdict(config), [args.seed], None)
        payload["started_at"] = payload["finished_at"] = time.time()
        payload["exit_status"] = EXIT_OK
        _write_run_manifest(out_dir, payload)
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    from .evaluation import dump_embeddings

    ckpt, model, vocab = _load_model(args.checkpoint)
    samples = _eval_samples(ckpt, args.manifest)
    rows = dump_embeddings(model, vocab, ckpt.meta.get("task", "ocr_read"), samples, args.out)
    payload = _manifest_payload(
        "dump-embeddings",
        {"checkpoint": args.checkpoint, "manifest": args.manifest},
        [],
        vocab.content_hash(),
    )
    payload["started_at"] = payload["finished_at"] = time.time()
    payload["exit_status"] = EXIT_OK
    _write_run_manifest(Path(args.out).parent, payload)
    print(f"wrote {rows} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .render import RenderConfig
    from .trainer import TrainConfig

    parser = argparse.ArgumentParser(
        prog="scob",
        description="Online-rendered contrastive OCR pre-training toolkit",
    )
    parser.add_argument("--version", action="version", version=f"scob {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="write PNG samples plus a JSONL manifest", epilog=_field_help(RenderConfig))
    p.add_argument("--config", help="JSON render config (see epilog for keys)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", choices=("synthetic", "real"), default="synthetic")
    p.add_argument("--words", help="comma-separated fixed word list (default: generated)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pretrain", help="run or resume a pre-training job", epilog=_field_help(TrainConfig))
    p.add_argument("--config", help="JSON train config (see epilog for keys)")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("vanilla", "supcon_only", "render_only", "scob", "scob_full_annotation"))
    p.add_argument("--task", choices=("text_read", "ocr_read"))
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-peak", dest="lr_peak", type=float)
    p.add_argument("--word-order", dest="word_order", choices=("raster", "random"))
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="path of the report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-render", help="measure render (and optionally disk-load) throughput")
    p.add_argument("--config", help="JSON render config")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--compare-dir", help="directory of images to measure decode speed on")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional run directory for the stats")
    p.set_defaults(func=cmd_bench_render)

    p = sub.add_parser("dump-embeddings", help="teacher-forced projection dump as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    threads = os.environ.get("SCOB_THREADS")
    if threads:
        try:
            import torch

            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"scob: bad SCOB_THREADS value {threads!r}", file=sys.stderr)
            return EXIT_CONFIG
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"scob: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"scob: numeric abort: {e} (batch seeds: {e.batch_seeds})", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"scob: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
