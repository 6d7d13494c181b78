"""Command-line entry point: ``fedbif {run,floor,sparsity,inspect}``.

Exit status is 0 on success; failures print ``error[<category>]: <message>``
to stderr and exit with the category's code (see ``fedbif --help``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import errors
from .experiments import (
    OUTPUT_ENV,
    RunConfig,
    load_config,
    load_model,
    output_dir,
    parse_config,
    parse_floor_config,
    run_experiment,
)
from .floor import FloorHarnessConfig, run_floor_harness
from .sparsity import exact_zero_fraction, measure_sparsity
from .wire import KIND_NAMES, ClientUpdate, QuantizedModel, TensorMessage, decode, read_header

EXIT_CODES = """exit codes:
  0  success
  1  unexpected error
  2  invalid configuration or specification
  3  bad data or tensor shapes
  4  protocol or accounting violation
  5  undecodable wire payload
  6  floor harness failed its closed-form self-check"""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbif",
        description="Federated bit-freezing simulator.",
        epilog=EXIT_CODES + f"\n\n{OUTPUT_ENV} overrides the output directory of run and floor.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federated experiment from a YAML config",
                         formatter_class=argparse.RawDescriptionHelpFormatter,
                         epilog="Any config field can be overridden with --set section.key=value,\n"
                                "e.g. --set training.lr=0.1 --set method.schedule=random")
    run.add_argument("config", nargs="?", help="YAML run config (defaults apply when omitted)")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config field (repeatable)")
    run.add_argument("--method", help="shorthand for --set method.name=...")
    run.add_argument("--rounds", type=int, help="shorthand for --set rounds=...")
    run.add_argument("--seeds", type=int, nargs="+", help="shorthand for --set seeds=[...]")
    run.add_argument("--output", help="output directory (beats the config and the environment)")
    run.add_argument("--quiet", action="store_true", help="print only the summary")

    floor = sub.add_parser("floor", help="error floor vs bit width on least squares")
    floor.add_argument("config", nargs="?", help="optional YAML with harness fields")
    floor.add_argument("--m", type=int, nargs="+", dest="m_values", help="bit widths to sweep")
    floor.add_argument("--rounds", type=int)
    floor.add_argument("--seeds", type=int, nargs="+")
    floor.add_argument("--dim", type=int)
    floor.add_argument("--samples", type=int)
    floor.add_argument("--c", type=float, help="step constant c in eta_t = c / (L sqrt t)")
    floor.add_argument("--output", help="directory for floor_summary.csv")

    sp = sub.add_parser("sparsity", help="sparsity report for a saved model (.npz)")
    sp.add_argument("model", help="model file written by `run` with save_model: true")
    sp.add_argument("--m", type=int, default=4, help="bit width for the zero-integer count")

    ins = sub.add_parser("inspect", help="decode a wire payload and describe it")
    ins.add_argument("payload", help="binary message file")
    return parser


def _cmd_run(args) -> int:
    overrides = list(args.overrides)
    if args.method:
        overrides.append(f"method.name={args.method}")
    if args.rounds is not None:
        overrides.append(f"rounds={args.rounds}")
    if args.seeds:
        overrides.append(f"seeds={json.dumps(args.seeds)}")
    cfg = load_config(args.config, overrides) if args.config else parse_config("", "<defaults>", overrides)
    result = run_experiment(cfg, output=args.output)
    if not args.quiet:
        for r in result.records:
            print(f"seed {r['seed']} round {r['round']:3d}  acc {r['test_accuracy']:.4f}  "
                  f"loss {r['train_loss']:.4f}  up {r['uplink_bpp']:.3f}  down {r['downlink_bpp']:.3f}  "
                  f"sparsity {r['sparsity']:.3f}")
    s = result.summary
    print(f"{s['method']}: final accuracy {s['final_accuracy_mean']:.4f} +- {s['final_accuracy_std']:.4f} "
          f"over {s['seeds']} seed(s); uplink {s['uplink_bpp']:.3f} bpp, downlink {s['downlink_bpp']:.3f} bpp")
    print(f"log: {result.log_path}\nsummary: {result.summary_path}")
    return 0


def _cmd_floor(args) -> int:
    cfg = parse_floor_config(Path(args.config).read_text(), args.config) if args.config else FloorHarnessConfig()
    changes = {k: v for k, v in {
        "m_values": args.m_values, "rounds": args.rounds, "seeds": args.seeds,
        "dim": args.dim, "samples": args.samples, "c": args.c,
    }.items() if v is not None}
    try:
        cfg = replace(cfg, **changes)
    except errors.SpecificationError as exc:
        raise errors.ConfigError(str(exc)) from None
    summary = run_floor_harness(cfg)
    table = summary.table()
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(table[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(table)
    out = Path(args.output or output_dir(RunConfig(output="runs")))
    out.mkdir(parents=True, exist_ok=True)
    (out / "floor_summary.csv").write_text(buf.getvalue())
    print(f"{'m':>3}  {'mean gap':>12}  {'std':>12}  {'x fp32':>9}")
    for row in table:
        label = "fp" if row["m"] == 32 else str(row["m"])
        print(f"{label:>3}  {row['mean_gap']:12.4e}  {row['std_gap']:12.4e}  {row['ratio_to_fp32']:9.2f}")
    print(f"control gap {max(summary.control_gaps):.2e}, parameter error {max(summary.control_distances):.2e}")
    print(f"summary: {out / 'floor_summary.csv'}")
    if not summary.validated:
        raise errors.HarnessError("full-precision control did not reach the normal-equations optimum")
    return 0


def _cmd_sparsity(args) -> int:
    model = load_model(args.model)
    report = {
        "model": args.model,
        "m": args.m,
        "zero_integer_fraction": measure_sparsity(model, args.m),
        "exact_zero_fraction": exact_zero_fraction(model),
        "weights": model.weight_count,
    }
    print(json.dumps(report, indent=2))
    return 0


def _describe(payload) -> dict:
    if isinstance(payload, QuantizedModel):
        return {"type": "downlink", "kind": "bitplane", "round": payload.round, "m": payload.m,
                "activated": list(payload.activated),
                "layers": [{"shape": list(q.shape), "alpha": a, "bias": int(b.size)}
                           for q, a, b in zip(payload.ints, payload.alphas, payload.biases)]}
    if isinstance(payload, ClientUpdate):
        return {"type": "uplink", "kind": "bitplane", "round": payload.round, "m": payload.m,
                "activated": list(payload.activated), "client": payload.client_id,
                "samples": payload.sample_count,
                "layers": [{"shape": list(p[0].shape), "ones": [int(np.count_nonzero(x)) for x in p]}
                           for p in payload.planes]}
    assert isinstance(payload, TensorMessage)
    return {"type": "uplink" if payload.direction else "downlink", "kind": KIND_NAMES[payload.kind],
            "round": payload.round, "m": payload.m, "client": payload.client_id,
            "samples": payload.sample_count,
            "layers": [{"shape": list(np.shape(c)), "scale": s} for c, s in zip(payload.codes, payload.scales)]}


def _cmd_inspect(args) -> int:
    try:
        data = Path(args.payload).read_bytes()
    except OSError as exc:
        raise errors.DataError(f"cannot read {args.payload}: {exc.strerror}") from None
    header = read_header(data)
    info = _describe(decode(data))
    info["bytes"] = len(data)
    info["version"] = header.version
    print(json.dumps(info, indent=2))
    return 0


COMMANDS = {"run": _cmd_run, "floor": _cmd_floor, "sparsity": _cmd_sparsity, "inspect": _cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except errors.FedBiFError as exc:
        category = type(exc).__name__.removesuffix("Error").lower() or "error"
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
