"""Command-line experiment runner.

Subcommands: train, eval, quantize, diagnose, gradcheck, sweep.
Exit codes are a stable contract: 0 success, 2 config problem, 3 numeric
failure, 4 I/O problem. Gradcheck exits 1 when a check fails.
"""

import os

# Pin BLAS threading before numpy loads so CLI runs are bit-reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from pathlib import Path

from . import experiment
from .checkpoint import CheckpointError
from .data import IdxError
from .experiment import ConfigError, TrainNumericError
from .linalg import SvdConvergenceError
from .model import NonFiniteActivationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise CheckpointError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}") from e
    return raw


def cmd_train(args) -> int:
    raw = _load_config(args.config)
    cfg = experiment.parse_experiment_config(raw)
    run_dir = args.run_dir or cfg.run_dir or "run"
    summary = experiment.run_train(cfg, run_dir, raw_config=raw, seed=args.seed)
    print(json.dumps(summary, indent=1, sort_keys=True))
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    raw = _load_config(args.config)
    cfg = experiment.parse_experiment_config(raw)
    out = experiment.run_eval(args.checkpoint, cfg)
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_quantize(args) -> int:
    raw = _load_config(args.config)
    cfg = experiment.parse_experiment_config(raw)
    out_path = Path(args.run_dir or ".") / "quantization_report.json"
    report = experiment.run_quantize(args.checkpoint, cfg, scheme=args.scheme, out_path=out_path)
    print(json.dumps({k: report[k] for k in ("fp_accuracy", "quant_accuracy", "acc_drop")}, indent=1))
    print(f"report: {out_path}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    raw = _load_config(args.config)
    cfg = experiment.parse_experiment_config(raw)
    out_dir = args.run_dir or "diagnostics"
    result = experiment.run_diagnose(
        args.checkpoint, cfg, out_dir, zero_top_k=args.zero_top_k, scheme=args.scheme
    )
    brief = {
        "total_pair_energy": result["total_pair_energy"],
        "max_act": {
            "module": result["max_act"]["module_max"],
            "block": result["max_act"]["block_max"],
        },
    }
    if "intervention_rows" in result:
        brief["intervention_rows"] = result["intervention_rows"]
    print(json.dumps(brief, indent=1))
    print(f"reports: {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    raw = _load_config(args.config)
    cfg = experiment.parse_experiment_config(raw)
    report = experiment.run_gradcheck(cfg)
    for entry in report["model"]["params"]:
        status = "ok" if entry["ok"] else "FAIL"
        print(f"{status:4s} {entry['param']:28s} max_rel_err={entry['max_rel_err']:.3e}")
    print(f"cd gradients: max_rel_err={report['cd_gradients']['max_rel_err']:.3e} "
          f"{'ok' if report['cd_gradients']['ok'] else 'FAIL'}")
    print(f"absorb factor: max_abs_err={report['absorb_factor']['max_abs_err']:.3e} "
          f"{'ok' if report['absorb_factor']['ok'] else 'FAIL'}")
    if args.run_dir:
        Path(args.run_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.run_dir) / "gradcheck.json").write_text(json.dumps(report, indent=1))
    print("PASS" if report["ok"] else "FAIL")
    return EXIT_OK if report["ok"] else 1


def cmd_sweep(args) -> int:
    raw = _load_config(args.config)
    run_dir = args.run_dir or raw.get("run_dir") or "sweep"
    rows = experiment.run_sweep(raw, run_dir)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} runs, {len(failed)} failed; table: {Path(run_dir) / 'sweep.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--run-dir", default=None, help="output directory")
        return p

    p = add("train", cmd_train, help="train one run and summarize it")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = add("eval", cmd_eval, help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)

    p = add("quantize", cmd_quantize, help="calibrate, fake-quantize, evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", choices=experiment.QUANT_SCHEMES, default=None)

    p = add("diagnose", cmd_diagnose, help="activation, alignment, and pair reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--zero-top-k", type=int, default=0,
                   help="also run the direction-zeroing intervention up to k")
    p.add_argument("--scheme", choices=experiment.QUANT_SCHEMES, default=None)

    add("gradcheck", cmd_gradcheck, help="finite-difference gradient verification")

    add("sweep", cmd_sweep, help="run a condition x seed grid into one CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainNumericError, NonFiniteActivationError, SvdConvergenceError,
            FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, IdxError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
