"""Command-line surface.

Exit codes: 0 success, 2 config error, 3 runtime failure, 4 check failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import ConfigError, load_config
from .contextgen import PROMPTS, ContextCache, get_or_generate
from .datasynth import generate_corpus, read_manifest, write_manifest
from .metrics import context_report, format_table
from .models import ContextModel
from .training import (compare_variants, distillation_cosine, evaluate_system,
                       make_backend, train_one)

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4


def _split_overrides(argv):
    """Collect unregistered --dotted.key value pairs as config overrides."""
    known, overrides = [], {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and ("." in arg or "=" in arg or _looks_like_leaf(arg)):
            if "=" in arg:
                key, value = arg[2:].split("=", 1)
            else:
                if i + 1 >= len(argv):
                    raise ConfigError(f"flag {arg} is missing a value")
                key, value = arg[2:], argv[i + 1]
                i += 1
            overrides[key] = value
        else:
            known.append(arg)
        i += 1
    return known, overrides


_STRUCTURAL = {"--config", "--checkpoint", "--split", "--out", "--prompts"}


def _looks_like_leaf(arg):
    return arg.split("=")[0] not in _STRUCTURAL


def _load(args, overrides):
    return load_config(args.config, overrides)


def cmd_gen_data(args, overrides):
    cfg = _load(args, overrides)
    manifest = generate_corpus(cfg.corpus)
    write_manifest(manifest, cfg.paths.manifest, cfg.paths.features)
    n = sum(len(v) for v in manifest.streams.values())
    print(f"wrote {n} segments to {cfg.paths.manifest} (+ {cfg.paths.features})")
    return 0


def cmd_gen_context(args, overrides):
    cfg = _load(args, overrides)
    manifest = read_manifest(cfg.paths.manifest, cfg.paths.features)
    backend = make_backend(cfg)
    cache = ContextCache(cfg.paths.cache)
    prompts = args.prompts.split(",") if args.prompts else [cfg.train.prompt]
    count = 0
    for prompt in prompts:
        if prompt not in PROMPTS:
            raise ConfigError(f"unknown prompt {prompt!r}")
        for sid, segs in manifest.streams.items():
            for seg in segs[:-1]:
                get_or_generate(cache, backend, manifest, sid, seg.index, prompt)
                count += 1
    print(f"cached {count} generations in {cfg.paths.cache}")
    return 0


def cmd_train(args, overrides):
    cfg = _load(args, overrides)
    manifest = read_manifest(cfg.paths.manifest, cfg.paths.features)
    for seed in cfg.train.seeds:
        result, model = train_one(cfg, manifest, seed, out_dir=cfg.paths.out_dir)
        final = result.losses[-1] if result.losses else float("nan")
        print(f"{cfg.train.variant} seed={seed}: {len(result.losses)} steps, "
              f"final loss {final:.4f}, skipped {result.skipped_infeasible}, "
              f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_eval(args, overrides):
    cfg = _load(args, overrides)
    manifest = read_manifest(cfg.paths.manifest, cfg.paths.features)
    model = ContextModel.load(args.checkpoint)
    metrics = evaluate_system(cfg, model, manifest, split=args.split)
    for k, v in metrics.items():
        print(f"{k}: {v:.4f}")
    return 0


def cmd_compare(args, overrides):
    cfg = _load(args, overrides)
    manifest = read_manifest(cfg.paths.manifest, cfg.paths.features)
    report, _ = compare_variants(cfg, manifest, progress=print)
    columns = ["variant", "inference_params", "train_params"] + sorted(
        k for k in report.rows[0]
        if k not in ("variant", "inference_params", "train_params"))
    print(format_table(report.rows, columns))
    print(f"|D - E| delta: {report.d_vs_e_delta:.3f}")
    print(f"report fingerprint: {report.fingerprint}")
    return 0


def cmd_report(args, overrides):
    cfg = _load(args, overrides)
    manifest = read_manifest(cfg.paths.manifest, cfg.paths.features)
    backend = make_backend(cfg)
    cache = ContextCache(cfg.paths.cache)
    contexts = {}
    for prompt in sorted(PROMPTS):
        contexts[prompt] = {}
        for sid, segs in manifest.streams.items():
            for seg in segs[:-1]:
                ctx = get_or_generate(cache, backend, manifest, sid, seg.index, prompt)
                contexts[prompt][ctx.segment_key] = ctx.text
    rows = context_report(manifest, contexts, split=args.split)
    print(format_table(rows, ["source", "rouge1_f", "mean_words"]))
    return 0


def cmd_grad_check(args, overrides):
    from .gradsuite import run_grad_suite
    report = run_grad_suite(verbose=True)
    if not report["pass"]:
        print(f"FAIL: max relative error {report['max_rel_err']:.3e}")
        return EXIT_CHECK
    print(f"OK: max relative error {report['max_rel_err']:.3e}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ctxtune",
        description="Context-aware fine-tuning experiments on synthetic streams.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [("gen-data", cmd_gen_data), ("gen-context", cmd_gen_context),
                     ("train", cmd_train), ("eval", cmd_eval),
                     ("compare", cmd_compare), ("report", cmd_report),
                     ("grad-check", cmd_grad_check)]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config file")
        p.set_defaults(fn=fn)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        if name in ("eval", "report"):
            p.add_argument("--split", default="eval")
        if name == "gen-context":
            p.add_argument("--prompts", default=None,
                           help="comma-separated prompt ids (default: train.prompt)")

    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        known, overrides = _split_overrides(argv[1:]) if argv else ([], {})
        args = parser.parse_args(argv[:1] + known)
        return args.fn(args, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
