"""Command-line surface: sweeps to CSV, model/program files, verification.

Every command is reproducible byte for byte given the same flags and seed;
artifacts are written atomically (temp file + rename).  Exit codes: 0 success,
1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import engine, stats
from .container import atomic_write_text, read_tensor, write_tensor
from .errors import FixError
from .formats import FixTensor
from .graph import grid_search_fl, load_model, save_model
from .train import (
    TrainConfig,
    build_model,
    evaluate,
    make_synthetic_task,
    prepare_inputs,
    tiny_finetune,
    train_float,
    train_qat,
    training_log_csv,
)
from .verifylib import run_a6_suite, run_fusion_suite, run_integer_contract_suite


def _out_dir(args) -> str:
    out = args.out or os.environ.get("FXPQUANT_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _parse_space(text: str) -> tuple[int, ...]:
    """FL search space: either 'lo..hi' or a comma list like '6,7,8'."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad FL space {text!r}") from None


def _sweep_config(args) -> stats.SweepConfig:
    grid = np.logspace(np.log10(args.sigma_min), np.log10(args.sigma_max), args.points)
    return stats.SweepConfig(
        sigma_grid=grid,
        n_samples=args.samples,
        signed=args.signed,
        word_length=args.word_length,
        seed=args.seed,
    )


def cmd_stats_sweep(args) -> int:
    out = _out_dir(args)
    table = stats.sweep(_sweep_config(args))
    atomic_write_text(os.path.join(out, "sweep_grid.csv"), stats.error_grid_csv(table))
    atomic_write_text(os.path.join(out, "sweep_argmin.csv"), stats.argmin_csv(table))
    print(f"wrote sweep_grid.csv and sweep_argmin.csv to {out}")
    print(f"min-over-FL error: worst {table.min_error.max():.6f}")
    return 0


def cmd_stats_thresholds(args) -> int:
    out = _out_dir(args)
    table = stats.sweep(_sweep_config(args))
    points = stats.threshold_sigmas(table)
    atomic_write_text(os.path.join(out, "thresholds.csv"), stats.thresholds_csv(points))
    print(f"wrote thresholds.csv to {out} ({len(points)} transitions)")
    if len(points) >= 2:
        slope, intercept = stats.fit_threshold_line(points)
        print(f"log2(sigma) vs FL fit: slope {slope:.4f}, intercept {intercept:.4f}")
    return 0


def _emit_model_artifacts(out: str, graph, emit_sample: bool = True) -> None:
    save_model(os.path.join(out, "model.fxq"), graph)
    if graph.frozen:
        program = engine.compile(graph)
        for w in program.warnings:
            print(f"compile warning: {w}")
        engine.save_program(os.path.join(out, "program.fxq"), program)
        if emit_sample:
            task = make_synthetic_task(0, 64, 64)
            x = prepare_inputs(graph, task.test_x[:8]).numpy()
            write_tensor(
                os.path.join(out, "sample_input.fxt"),
                FixTensor.from_real(x, program.input_format),
            )


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = TrainConfig(
        arch=args.arch,
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        signed_input=args.signed_input,
    )
    task = make_synthetic_task(cfg.seed, cfg.n_train, cfg.n_test)
    if args.float:
        graph = train_float(cfg)
        acc = evaluate(graph, task.test_x, task.test_y, quantized=False)
    else:
        rows: list = []
        graph = train_qat(cfg, log_rows=rows)
        atomic_write_text(os.path.join(out, "train_log.csv"), training_log_csv(rows))
        acc = evaluate(graph, task.test_x, task.test_y, quantized=True)
    _emit_model_artifacts(out, graph)
    print(f"test accuracy: {acc:.4f}")
    return 0


def cmd_finetune(args) -> int:
    out = _out_dir(args)
    graph = load_model(args.model)
    cfg = TrainConfig(
        mode="finetune",
        arch=args.arch,
        seed=args.seed,
        fl_space=args.fl_space,
        finetune_steps=args.steps,
        finetune_lr=args.lr,
    )
    rows: list = []
    graph = tiny_finetune(graph, cfg, log_rows=rows)
    atomic_write_text(os.path.join(out, "finetune_log.csv"), training_log_csv(rows))
    task = make_synthetic_task(cfg.seed, cfg.n_train, cfg.n_test)
    acc = evaluate(graph, task.test_x, task.test_y, quantized=True)
    _emit_model_artifacts(out, graph)
    print(f"test accuracy: {acc:.4f}")
    return 0


def _calibrated_model(args):
    graph = load_model(args.model) if args.model else build_model(TrainConfig(seed=args.seed))
    task = make_synthetic_task(args.seed, 512, 256)
    calib = prepare_inputs(graph, task.train_x[: args.calib_n])
    graph.calibrate(calib, pretrained=bool(args.model))
    return graph, task, calib


def cmd_quantize(args) -> int:
    out = _out_dir(args)
    graph, task, _ = _calibrated_model(args)
    graph.freeze()
    _emit_model_artifacts(out, graph)
    acc = evaluate(graph, task.test_x, task.test_y, quantized=True)
    print(f"quantized (formula formats); test accuracy: {acc:.4f}")
    return 0


def cmd_grid_search(args) -> int:
    out = _out_dir(args)
    graph, task, calib = _calibrated_model(args)
    import torch

    y = torch.from_numpy(task.train_y[: args.calib_n])
    grid_search_fl(graph, calib, y, args.fl_space)
    graph.freeze()
    _emit_model_artifacts(out, graph)
    acc = evaluate(graph, task.test_x, task.test_y, quantized=True)
    print(f"quantized (grid-searched formats); test accuracy: {acc:.4f}")
    return 0


def cmd_infer(args) -> int:
    out = _out_dir(args)
    program = engine.load_program(args.program)
    x = read_tensor(args.input)
    logits, trace = engine.infer(program, x)
    write_tensor(os.path.join(out, args.output), logits)
    print(trace.summary())
    if args.dump_trace:
        counters = {
            "mults_8x8": trace.mults_8x8,
            "wide_multiplies": trace.wide_multiplies,
            "shifts": trace.shifts,
            "acc_max_abs": trace.acc_max_abs,
            "acc_bound_max": trace.acc_bound_max,
        }
        atomic_write_text(
            os.path.join(out, args.dump_trace), json.dumps(counters, sort_keys=True) + "\n"
        )
    print(f"argmax: {logits.mantissa.argmax(axis=-1).tolist()}")
    return 0


def cmd_verify(args) -> int:
    graph = program = None
    if args.model and args.program:
        graph = load_model(args.model)
        program = engine.load_program(args.program)
    suites = [
        ("fusion-equivalence", lambda: run_fusion_suite(args.chains, args.seed)),
        ("private-fl-identity", lambda: run_a6_suite()),
        (
            "integer-only-contract",
            lambda: run_integer_contract_suite(graph, program, seed=args.seed),
        ),
    ]
    failed = False
    for name, suite in suites:
        ok, detail = suite()
        print(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")
        failed = failed or not ok
    return 1 if failed else 0


def _add_sweep_flags(p: argparse.ArgumentParser, lo: float, hi: float):
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--signed", action="store_true", dest="signed")
    group.add_argument("--unsigned", action="store_false", dest="signed")
    p.add_argument("--sigma-min", type=float, default=lo)
    p.add_argument("--sigma-max", type=float, default=hi)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--word-length", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fxpquant",
        description="8-bit fixed-point quantization toolkit",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="output directory (or $FXPQUANT_OUT)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats-sweep", help="relative-error grid over (sigma, FL)")
    _add_sweep_flags(p, 0.1, 40.0)
    p.set_defaults(fn=cmd_stats_sweep)

    p = sub.add_parser("stats-thresholds", help="argmin-FL transition sigmas")
    _add_sweep_flags(p, 0.01, 1000.0)
    p.set_defaults(fn=cmd_stats_thresholds, points=200)

    p = sub.add_parser("train", help="train on the synthetic task")
    p.add_argument("--arch", default="resnet", choices=["mlp", "cnn", "resnet"])
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--float", action="store_true", help="full-precision baseline")
    p.add_argument("--signed-input", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="grid-search formats + short adaptation")
    p.add_argument("--model", required=True, help="pre-trained float model container")
    p.add_argument("--arch", default="resnet", choices=["mlp", "cnn", "resnet"])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--fl-space", type=_parse_space, default=tuple(range(9)))
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("quantize", help="calibrate, pick formats, freeze, compile")
    p.add_argument("--model", default=None, help="model container (default: fresh toy)")
    p.add_argument("--calib-n", type=int, default=256)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("grid-search", help="quantize with grid-searched formats")
    p.add_argument("--model", default=None)
    p.add_argument("--calib-n", type=int, default=256)
    p.add_argument("--fl-space", type=_parse_space, default=tuple(range(9)))
    p.set_defaults(fn=cmd_grid_search)

    p = sub.add_parser("infer", help="run a compiled program on a tensor file")
    p.add_argument("--program", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="logits.fxt")
    p.add_argument("--dump-trace", default=None)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("verify", help="fusion, identity and contract suites")
    p.add_argument("--model", default=None)
    p.add_argument("--program", default=None)
    p.add_argument("--chains", type=int, default=20)
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
