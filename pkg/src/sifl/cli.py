"""Command-line entry point: keygen, run, check, and bench subcommands.

Exit status is 0 iff every check the invocation performs passes; the last
line of stdout is always a one-line JSON summary, machine-readable on
failure as well as success.  The SIFL_SEED environment variable overrides
the configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, desk_benchmark, load_config, reduced_mnist
from .datasets import make_image_blobs, write_idx_images, write_idx_labels
from .keys import save_keyset
from .metrics import write_metrics
from .training import build_keys, build_model, run_training

__all__ = ["main"]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="path to a key = value config file")
    parser.add_argument("--mode", choices=("plain", "sifl", "dual"))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output path (CSV for run/check/bench, blob for keygen)")
    parser.add_argument("--net", metavar="HOST:PORT",
                        help="run over TCP sockets, listening on this address")
    parser.add_argument("--verbosity", type=int, choices=(0, 1, 2), default=None)


def _resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = load_config(args.config) if args.config else (base or RunConfig())
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if "SIFL_SEED" in os.environ:
        overrides["seed"] = int(os.environ["SIFL_SEED"])
    if args.out:
        overrides["out"] = args.out
    if args.net:
        overrides["net"] = args.net
    if args.verbosity is not None:
        overrides["verbosity"] = args.verbosity
    cfg = replace(cfg, **overrides) if overrides else cfg
    cfg.validate()
    return cfg


def _summary(payload: dict) -> int:
    print(json.dumps(payload))
    return 0 if payload.get("status") == "pass" else 1


def _materialize_idx(cfg: RunConfig, directory: Path) -> RunConfig:
    """Generate deterministic image-blob IDX files when none are on disk."""
    if all(Path(p).exists() for p in
           (cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels)):
        return cfg
    directory.mkdir(parents=True, exist_ok=True)
    side = int(round(cfg.layers[0] ** 0.5))
    train_n = cfg.train_limit or 5000
    test_n = cfg.test_limit or 1000
    images, labels = make_image_blobs(cfg.layers[-1], train_n + test_n, side, seed=cfg.seed + 977)
    paths = {
        "train_images": directory / "train-images.idx",
        "train_labels": directory / "train-labels.idx",
        "test_images": directory / "test-images.idx",
        "test_labels": directory / "test-labels.idx",
    }
    write_idx_images(paths["train_images"], images[:train_n])
    write_idx_labels(paths["train_labels"], labels[:train_n])
    write_idx_images(paths["test_images"], images[train_n:])
    write_idx_labels(paths["test_labels"], labels[train_n:])
    return replace(cfg, **{k: str(v) for k, v in paths.items()})


def _run_and_report(cfg: RunConfig, command: str) -> int:
    transport = "socket" if cfg.net else "sim"
    result = run_training(cfg, transport=transport)
    if cfg.out:
        write_metrics(result.records, result.report, cfg.out)
    if cfg.verbosity >= 1:
        for rec in result.records:
            err = "" if rec.equivalence_rel_err is None else f"  eq_err={rec.equivalence_rel_err:.3e}"
            print(f"round {rec.round_index:3d} [{rec.mode}] loss={rec.train_loss:.4f} "
                  f"acc={rec.test_accuracy:.4f}{err}")
    payload = {
        "command": command,
        "status": "pass",
        "mode": cfg.mode,
        "rounds": cfg.rounds,
        "final_accuracy": result.records[-1].test_accuracy,
    }
    if result.report is not None:
        print(result.report.summary())
        payload.update(
            max_equivalence_rel_err=result.report.max_error,
            threshold=result.report.threshold,
        )
        if not result.report.passed:
            payload.update(status="fail", reason="equivalence threshold exceeded",
                           worst_round=result.report.worst_round)
    if command == "bench":
        sifl_records = [r for r in result.records if r.mode == "sifl"]
        crypto_ms = sum(r.t_encrypt_ms + r.t_decrypt_ms for r in sifl_records)
        train_ms = sum(r.t_train_ms for r in sifl_records)
        ratio = crypto_ms / train_ms if train_ms else 0.0
        print(f"encrypt+decrypt {crypto_ms:.1f} ms over {train_ms:.1f} ms training "
              f"(ratio {ratio:.3f})")
        payload.update(crypto_ms=crypto_ms, train_ms=train_ms, overhead_ratio=ratio)
        if ratio > 0.5:
            payload.update(status="fail", reason="encryption overhead above 50% of training")
    return _summary(payload)


def cmd_keygen(args) -> int:
    cfg = _resolve_config(args)
    if not cfg.out:
        print(json.dumps({"command": "keygen", "status": "fail",
                          "reason": "--out (or config out) is required"}))
        return 1
    model = build_model(cfg)
    keys = build_keys(cfg, model)
    keys.validate()
    save_keyset(keys, cfg.out)
    return _summary({
        "command": "keygen", "status": "pass", "out": cfg.out,
        "blocks": len(keys.blocks), "plain_dim": keys.total_n, "encrypted_dim": keys.total_m,
    })


def cmd_run(args) -> int:
    return _run_and_report(_resolve_config(args), "run")


def cmd_check(args) -> int:
    cfg = replace(_resolve_config(args, desk_benchmark()), mode="dual")
    return _run_and_report(cfg, "check")


def cmd_bench(args) -> int:
    cfg = _resolve_config(args, reduced_mnist())
    if cfg.dataset == "idx":
        cfg = _materialize_idx(cfg, Path(args.data_dir))
    return _run_and_report(cfg, "bench")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sifl",
        description="Federated averaging on matrix-encrypted parameters, "
                    "with plain/encrypted equivalence checking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_keygen = sub.add_parser("keygen", help="generate a key set and write the key blob")
    p_run = sub.add_parser("run", help="run a training experiment and write metrics CSV")
    p_check = sub.add_parser("check", help="dual-mode run asserting trajectory equivalence")
    p_bench = sub.add_parser("bench", help="image-scale preset with timing report")
    p_bench.add_argument("--data-dir", default="bench-data",
                         help="directory for (generated) IDX files")
    for p, fn in ((p_keygen, cmd_keygen), (p_run, cmd_run),
                  (p_check, cmd_check), (p_bench, cmd_bench)):
        _add_common(p)
        p.set_defaults(fn=fn)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # one JSON line, nonzero exit, no traceback spam
        print(json.dumps({"command": args.command, "status": "fail",
                          "error": type(exc).__name__, "reason": str(exc)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
