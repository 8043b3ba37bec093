"""Command line front end for the quantization toolkit.

Subcommands cover the whole desk workflow: gen-model and gen-samples
write the float model and calibration batches, calibrate freezes the
activation grids, quantize runs the staged pipeline, eval scores the
quantized model against its float reference, bench compares the static
and dynamic activation paths.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .model import build_toy_mllm, model_fingerprint, model_from_dict, model_to_dict
from .msq_aifs import ModalityLayout
from .pipeline import (
    CalibrationResult,
    PipelineConfig,
    bench,
    calibrate_pipeline,
    evaluate,
    generate_synthetic_samples,
    mquant_quantize,
    qmodel_from_dict,
    qmodel_to_dict,
)


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON; defaults when omitted")
    p.add_argument("--bits-w", type=int, dest="bits_w", help="weight bit width")
    p.add_argument("--bits-a", type=int, dest="bits_a", help="activation bit width")
    p.add_argument(
        "--granularity",
        choices=("per_channel", "per_group"),
        dest="weight_granularity",
        help="weight grid granularity",
    )
    p.add_argument("--group-size", type=int, dest="group_size")
    p.add_argument("--split-bits", type=int, dest="split_bits")
    p.add_argument("--no-rms", action="store_true", help="disable outlier-row splits")
    p.add_argument(
        "--no-aifs", action="store_true", help="keep sequences in original order"
    )
    p.add_argument(
        "--randomized-rotation",
        action="store_true",
        help="sign-randomized rotations (also forces splits off)",
    )
    p.add_argument("--seed", type=int, help="model build seed override")


def _build_pcfg(args: argparse.Namespace) -> PipelineConfig:
    d = _read_json(args.config) if getattr(args, "config", None) else {}
    for key in ("bits_w", "bits_a", "weight_granularity", "group_size", "split_bits"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "no_rms", False):
        d["rms"] = False
    if getattr(args, "no_aifs", False):
        d["aifs"] = False
    if getattr(args, "randomized_rotation", False):
        d["randomized_rotation"] = True
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return PipelineConfig.from_dict(d)


def _load_model(path):
    return model_from_dict(_read_json(path))


def _load_samples(path) -> list:
    """Load one batch file, or every file inside a directory of batches."""
    p = Path(path)
    if p.is_dir():
        files = sorted(child for child in p.iterdir() if child.is_file())
        if not files:
            raise ValueError(f"sample directory {path} is empty")
        raw = [pair for f in files for pair in fileio.load_samples(f)]
    else:
        raw = fileio.load_samples(p)
    return [(tensor, ModalityLayout(mod)) for tensor, mod in raw]


def cmd_gen_model(args: argparse.Namespace) -> int:
    pcfg = _build_pcfg(args)
    model = build_toy_mllm(pcfg.model)
    _write_json(args.out, model_to_dict(model))
    print(f"wrote {args.out} (fingerprint {model_fingerprint(model)})")
    return 0


def cmd_gen_samples(args: argparse.Namespace) -> int:
    samples = generate_synthetic_samples(
        args.count,
        args.length,
        layout_spec=args.layout,
        seed=args.seed,
        d_model=args.d_model,
    )
    fileio.save_samples(
        args.out, [(tensor, layout.modality) for tensor, layout in samples]
    )
    print(f"wrote {args.out} ({args.count} samples, length {args.length})")
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    pcfg = _build_pcfg(args)
    model = _load_model(args.model)
    samples = _load_samples(args.samples)
    calib = calibrate_pipeline(model, samples, pcfg)
    _write_json(args.out, calib.to_dict())
    print(
        f"wrote {args.out} ({calib.sample_count} samples, "
        f"{len(calib.msq)} block grids, fingerprint {calib.fingerprint})"
    )
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    pcfg = _build_pcfg(args)
    model = _load_model(args.model)
    if (args.calib is None) == (args.samples is None):
        raise ValueError("provide exactly one of --calib or --samples")
    if args.calib is not None:
        calib = CalibrationResult.from_dict(_read_json(args.calib))
        qm = mquant_quantize(model, pcfg, calib=calib)
    else:
        qm = mquant_quantize(model, pcfg, samples=_load_samples(args.samples))
    _write_json(args.out, qmodel_to_dict(qm))
    triggered = sum(1 for p in qm.plans.values() if p.triggered)
    print(f"wrote {args.out}")
    print(f"stages: {' -> '.join(qm.stage_log)}")
    print(
        f"weights: {len(qm.weight_q)} grids at {pcfg.bits_w}b "
        f"({pcfg.weight_granularity}), activations at {pcfg.bits_a}b"
    )
    print(f"split plans: {len(qm.plans)} built, {triggered} triggered")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    qm = qmodel_from_dict(_read_json(args.qmodel))
    samples = _load_samples(args.samples)
    report = evaluate(qm, samples, dynamic=args.dynamic)
    _write_json(args.out, report)
    m = report["metrics"]
    print(f"wrote {args.out}")
    print(
        f"{report['activation_mode']}: cosine mean {m['cosine_mean']:.6f}, "
        f"min {m['cosine_min']:.6f}, mse mean {m['mse_mean']:.3e} "
        f"over {m['samples']} samples"
    )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    qm = qmodel_from_dict(_read_json(args.qmodel))
    lengths = [int(tok) for tok in args.lengths.split(",") if tok.strip()]
    report = bench(qm, lengths, seed=args.seed)
    _write_json(args.out, report)
    print(f"wrote {args.out}")
    for entry in report["entries"]:
        print(
            f"L={entry['length']:>5}  static {entry['static']['scale_ops']:>6} ops  "
            f"dynamic {entry['dynamic']['scale_ops']:>6} ops"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mquant",
        description="Post-training quantization toolkit for a toy multimodal transformer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="build and save the seeded float model")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_model)

    p = sub.add_parser("gen-samples", help="write a synthetic calibration batch")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-model", type=int, default=64, dest="d_model")
    p.add_argument("--layout", help="fixed layout string like tvvt (default: random spans)")
    p.set_defaults(fn=cmd_gen_samples)

    p = sub.add_parser("calibrate", help="freeze activation grids from samples")
    _add_config_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True, help="batch file or directory of batches")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("quantize", help="run the staged pipeline")
    _add_config_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--calib", help="calibration JSON from the calibrate step")
    p.add_argument("--samples", help="calibrate inline from this batch instead")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="score a quantized model against its float reference")
    p.add_argument("--qmodel", required=True)
    p.add_argument("--samples", required=True, help="batch file or directory of batches")
    p.add_argument("--report", required=True, dest="out")
    p.add_argument(
        "--dynamic-baseline",
        action="store_true",
        dest="dynamic",
        help="score the per-token dynamic path instead of the static grids",
    )
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="static vs dynamic scale-op counts")
    p.add_argument("--qmodel", required=True)
    p.add_argument("--lengths", default="1,16,128")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True, dest="out")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
