"""Command-line harness binding the library together.

Subcommands: make-data, train, generate, analyze-rf, bench. Every run writes
one JSON run-manifest alongside its outputs (command, argv, resolved config,
seeds, git describe, duration, output paths); re-running `generate` with a
manifest's argv reproduces its output bitwise.

Exit codes: 0 success, 2 usage, 3 invariant/assertion failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import (
    ModelParams,
    assemble_condition,
    desk_config,
    load_checkpoint,
    random_params,
    save_checkpoint,
    tiny_config,
    upsample_tokens,
)
from .corpus import CorpusConfig, read_corpus, write_corpus
from .errors import BlockflowError, FormatError, InputError
from .flow import SamplerConfig, TrainConfig, train_loop
from .masks import (
    MaskSchedule,
    empirical_receptive_field,
    load_schedule,
    num_blocks,
    receptive_field,
    schedule_preset,
)
from .streaming import (
    StreamConfig,
    full_generate,
    latency_trend_stats,
    measure_chunk_latency,
    stream_generate,
)
from .tensorio import read_tensor, write_tensor

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_manifest(path: Path, command: str, argv: list[str], resolved: dict, seeds: dict,
                    outputs: list[Path], t0: float) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "resolved": resolved,
        "seeds": seeds,
        "git_describe": _git_describe(),
        "duration_s": round(time.perf_counter() - t0, 6),
        "outputs": [str(p) for p in outputs],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _schedule_from_args(args) -> MaskSchedule:
    if getattr(args, "schedule", None):
        return load_schedule(args.schedule)
    return schedule_preset(args.preset)


def _params_from_args(args, schedule: MaskSchedule) -> ModelParams:
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    config = tiny_config(schedule=schedule)
    return random_params(config, args.seed)


# -------------------------------- subcommands -----------------------------------


def cmd_make_data(args, argv) -> int:
    t0 = time.perf_counter()
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        if not isinstance(overrides, dict):
            raise FormatError(f"{args.config}: corpus config must be a JSON object")
    if args.num_utterances is not None:
        overrides["num_utterances"] = args.num_utterances
    overrides.setdefault("seed", args.seed)
    try:
        config = CorpusConfig(**overrides)
    except TypeError as e:
        raise FormatError(f"bad corpus config field: {e}") from e
    out = Path(args.out)
    write_corpus(out, config)
    _write_manifest(
        out / "run_manifest.json", "make-data", argv,
        {"corpus_config": overrides}, {"seed": config.seed}, [out], t0,
    )
    print(f"wrote {config.num_utterances} utterances to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    t0 = time.perf_counter()
    corpus_config, dataset = read_corpus(args.data)
    schedule = _schedule_from_args(args)
    model_config = tiny_config(
        schedule=schedule,
        feature_dim=corpus_config.feature_dim,
        token_vocab=corpus_config.token_vocab,
        speaker_dim=corpus_config.speaker_dim,
        upsample_factor=corpus_config.upsample_factor,
        dropout=args.dropout,
    )
    train_config = TrainConfig(
        cond_drop_rate=args.drop_rate,
        t_sampler=args.t_sampler,
        learning_rate=args.lr,
        steps=args.steps,
        batch_frames=args.batch_frames,
        log_every=args.log_every,
    )
    params, trace = train_loop(dataset, model_config, train_config, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint"
    save_checkpoint(ckpt, params)
    loss_csv = out_dir / "loss.csv"
    with open(loss_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows(trace)
    _write_manifest(
        out_dir / "run_manifest.json", "train", argv,
        {
            "model_config": {"preset": args.preset, "layers": model_config.layers},
            "train_config": train_config.__dict__,
        },
        {"seed": args.seed}, [ckpt, loss_csv], t0,
    )
    if trace:
        print(f"trained {args.steps} steps: loss {trace[0][1]:.4f} -> {trace[-1][1]:.4f}")
    else:
        print("trained 0 steps: checkpoint equals initialization")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _load_tokens(path: str) -> list[int]:
    try:
        tokens = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
        raise FormatError(f"{path}: token file must be a JSON list of integers")
    return tokens


def cmd_generate(args, argv) -> int:
    t0 = time.perf_counter()
    if args.checkpoint and (args.schedule or args.preset != "tiny"):
        raise InputError("--checkpoint carries its own schedule; do not combine with --preset/--schedule")
    schedule = _schedule_from_args(args)
    params = _params_from_args(args, schedule)
    mc = params.config

    tokens = _load_tokens(args.tokens)
    if args.speaker:
        speaker = read_tensor(args.speaker)
        if speaker.ndim != 1:
            raise FormatError(f"{args.speaker}: speaker tensor must be rank 1")
    else:
        speaker = np.zeros(mc.speaker_dim, dtype=np.float32)

    stream_config = StreamConfig(
        chunk_blocks=args.chunk_blocks,
        context_multiplier=args.context_mult,
        sampler=SamplerConfig(steps=args.ode_steps, cfg_alpha=args.cfg_alpha),
        noise_seed=args.noise_seed,
    )
    cond = assemble_condition(upsample_tokens(tokens, mc.upsample_factor), speaker, params)
    if args.mode == "batch":
        features = full_generate(cond, params, stream_config)
    else:
        per_block = mc.schedule.block_size_frames // mc.upsample_factor
        blocks = [tokens[i : i + per_block] for i in range(0, len(tokens), per_block)]
        pieces = []
        for emission in stream_generate(blocks, speaker, params, stream_config):
            print(
                f"chunk {emission.plan.chunk_index}: frames "
                f"[{emission.plan.emit_start_frame}, {emission.plan.emit_end_frame}) "
                f"in {emission.elapsed_ms:.1f} ms"
            )
            pieces.append(emission.features)
        features = np.concatenate(pieces, axis=0)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out, features)
    _write_manifest(
        Path(str(out) + ".manifest.json"), "generate", argv,
        {
            "mode": args.mode,
            "preset": args.preset,
            "checkpoint": args.checkpoint,
            "chunk_blocks": args.chunk_blocks,
            "context_mult": args.context_mult,
            "ode_steps": args.ode_steps,
            "cfg_alpha": args.cfg_alpha,
            "frames": int(features.shape[0]),
        },
        {"seed": args.seed, "noise_seed": args.noise_seed}, [out], t0,
    )
    print(f"generated {features.shape[0]} frames -> {out}")
    return EXIT_OK


def cmd_analyze_rf(args, argv) -> int:
    t0 = time.perf_counter()
    schedule = _schedule_from_args(args)
    params = _params_from_args(args, schedule)
    b = schedule.block_size_frames
    rf = receptive_field(schedule)

    if rf.bounded:
        p, q = rf.past_blocks, rf.future_blocks
        nb = p + q + 3
        probe = q + 1
        analytic = f"past={p} future={q} span={rf.span_frames(b)} frames"
    else:
        nb = 6
        probe = 3
        p = "inf" if rf.past_blocks is None else rf.past_blocks
        q = "inf" if rf.future_blocks is None else rf.future_blocks
        analytic = f"past={p} future={q} span=entire sequence"
    n = nb * b
    emp = empirical_receptive_field(params, n, probe, seed=args.seed)

    # Unbounded sides saturate at the sequence edge: an unbounded past shows up
    # as changed outputs all the way to the last block, an unbounded future as
    # changed outputs back to block 0.
    expect_past = (nb - 1 - probe) if rf.past_blocks is None else rf.past_blocks
    expect_future = probe if rf.future_blocks is None else rf.future_blocks
    match = emp.past_blocks == expect_past and emp.future_blocks == expect_future
    verdict = "MATCH" if match else (
        f"MISMATCH (measured past={emp.past_blocks} future={emp.future_blocks})"
    )
    print(f"{analytic}; empirical: {verdict}")
    out_dir = Path(args.out_dir)
    _write_manifest(
        out_dir / "analyze_rf.manifest.json", "analyze-rf", argv,
        {
            "preset": args.preset, "schedule": args.schedule,
            "analytic": {"past": rf.past_blocks, "future": rf.future_blocks},
            "empirical": {"past": emp.past_blocks, "future": emp.future_blocks},
            "probe_block": probe, "frames": n,
        },
        {"seed": args.seed}, [], t0,
    )
    return EXIT_OK if match else EXIT_INVARIANT


def cmd_bench(args, argv) -> int:
    t0 = time.perf_counter()
    schedule = _schedule_from_args(args)
    params = _params_from_args(args, schedule)
    stream_config = StreamConfig(
        chunk_blocks=args.chunk_blocks,
        context_multiplier=args.context_mult,
        sampler=SamplerConfig(steps=args.ode_steps, cfg_alpha=args.cfg_alpha),
        noise_seed=args.noise_seed,
    )
    rows = measure_chunk_latency(params, stream_config, args.chunks, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["chunk_index", "frames", "millis"])
        for r in rows:
            w.writerow([r.chunk_index, r.frames, f"{r.millis:.3f}"])
    stats = latency_trend_stats(rows)
    print(
        f"{args.mode}: {stats['chunks']} chunks, median {stats['median_ms']:.1f} ms, "
        f"slope {stats['slope_ms_per_chunk']:+.3f} ms/chunk "
        f"({100 * stats['slope_over_median']:+.2f}% of median), "
        f"spearman rho {stats['spearman_rho']:+.3f}"
    )
    if args.mode == "sliding_window":
        ok = abs(stats["slope_over_median"]) < 0.01
        print(f"flat-latency check (|slope| < 1% of median): {'PASS' if ok else 'FAIL'}")
    else:
        ok = stats["spearman_rho"] > 0.9
        print(f"growing-latency check (spearman rho > 0.9): {'PASS' if ok else 'FAIL'}")
    _write_manifest(
        Path(str(out) + ".manifest.json"), "bench", argv,
        {"mode": args.mode, "chunks": args.chunks, "stats": stats},
        {"seed": args.seed, "noise_seed": args.noise_seed}, [out], t0,
    )
    return EXIT_OK if ok else EXIT_INVARIANT


# ---------------------------------- parser --------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockflow",
        description="Block-masked streaming flow matching: data synthesis, training, "
        "generation, receptive-field analysis, latency benchmarks.",
    )
    parser.add_argument("--version", action="version", version=f"blockflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--threads", type=int, default=1,
                       help="reserved concurrency knob; kernels are single-threaded (default 1)")
        p.add_argument("--seed", type=int, default=0, help="root seed for params/training")
        p.add_argument("--out-dir", default="runs", help="directory for reports/manifests")

    def add_schedule(p):
        p.add_argument("--preset", default="tiny", choices=["tiny", "sr", "lr", "full", "causal"],
                       help="named mask schedule (default tiny)")
        p.add_argument("--schedule", help="JSON schedule file (overrides --preset)")

    def add_sampler(p, ode_steps_default):
        p.add_argument("--chunk-blocks", type=int, default=2)
        p.add_argument("--context-mult", type=int, default=1)
        p.add_argument("--ode-steps", type=int, default=ode_steps_default)
        p.add_argument("--cfg-alpha", type=float, default=0.5)
        p.add_argument("--noise-seed", type=int, default=0)

    p = sub.add_parser("make-data", help="synthesize a token/feature corpus")
    add_common(p)
    p.add_argument("--config", help="JSON file with CorpusConfig fields")
    p.add_argument("--num-utterances", type=int)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train the vector field on a corpus")
    add_common(p)
    add_schedule(p)
    p.add_argument("--data", required=True, help="corpus directory from make-data")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--drop-rate", type=float, default=0.3)
    p.add_argument("--t-sampler", default="logit_normal", choices=["logit_normal", "uniform"],
                   dest="t_sampler")
    p.add_argument("--batch-frames", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate features from tokens")
    add_common(p)
    add_schedule(p)
    add_sampler(p, ode_steps_default=10)
    p.add_argument("--mode", default="batch", choices=["batch", "stream"])
    p.add_argument("--tokens", required=True, help="JSON list of token ids")
    p.add_argument("--speaker", help="SFTN speaker vector (default: zeros)")
    p.add_argument("--checkpoint", help="checkpoint directory (default: random params)")
    p.add_argument("--out", required=True, help="output SFTN file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze-rf", help="check analytic vs empirical receptive field")
    add_common(p)
    add_schedule(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default: random params)")
    p.set_defaults(func=cmd_analyze_rf)

    p = sub.add_parser("bench", help="per-chunk latency benchmark")
    add_common(p)
    add_schedule(p)
    add_sampler(p, ode_steps_default=2)
    p.add_argument("--mode", default="sliding_window", choices=["sliding_window", "causal_cumulative"])
    p.add_argument("--chunks", type=int, default=100)
    p.add_argument("--out", default="runs/latency.csv", help="output CSV")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (BlockflowError, AssertionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
