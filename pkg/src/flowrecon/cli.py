"""``flowrecon simulate|train|reconstruct|evaluate --config PATH [--seed U64] [--out DIR]``

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(non-finite values or a flagged round trip), 3 input/output problems.
``FLOWRECON_THREADS`` caps the number of BLAS/OpenMP worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from threadpoolctl import threadpool_limits

from .config import ConfigError, load_config
from .engine.frt import FormatError
from .engine.tensor import NonFiniteError
from .operators import ConvergenceError, OperatorMismatch
from . import pipeline
from .pipeline import DataMismatch

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("simulate", "train", "reconstruct", "evaluate")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _u64(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser():
    parser = _Parser(prog="flowrecon", description="Conditional normalizing flows for "
                     "linear inverse problems.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="dotted-key configuration file")
    parser.add_argument("--seed", type=_u64, default=None, help="overrides run.seed")
    parser.add_argument("--out", default="flowrecon-out", help="working directory")
    return parser


def thread_limit():
    raw = os.environ.get("FLOWRECON_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FLOWRECON_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("FLOWRECON_THREADS must be >= 1")
    return n


def _print_row(row):
    print(f"epoch {row['epoch']:4d}  train {row['train_nll']:.4f}  val {row['val_nll']:.4f}  "
          f"lr {row['lr']:.3g}  round-trip {row['roundtrip_residual']:.2e}", flush=True)


def run(command, cfg, out):
    if command == "simulate":
        man = pipeline.simulate(cfg, out)
        print(f"wrote {man['count']} examples to {out}/data")
        return EXIT_OK
    if command == "train":
        result = pipeline.run_train(cfg, out, log=_print_row)
        print(f"final validation NLL {result.final_nll:.6g} (best {result.best_val:.6g} "
              f"at epoch {result.best_epoch})")
        if result.aborted:
            print(f"training aborted: {result.aborted}", file=sys.stderr)
            return EXIT_NUMERIC
        if result.unstable:
            print("round-trip residual exceeded the stability threshold", file=sys.stderr)
            return EXIT_NUMERIC
        return EXIT_OK
    if command == "reconstruct":
        outputs = pipeline.run_reconstruct(cfg, out)
        print("wrote " + ", ".join(sorted(outputs)) + f" to {out}/recon")
        return EXIT_OK
    res = pipeline.run_evaluate(cfg, out)
    (pm, ps), (sm, ss) = res["psnr"], res["ssim"]
    print(f"PSNR {pm:.2f} +- {ps:.2f} dB   SSIM {sm:.4f} +- {ss:.4f}   ({len(res['rows'])} images)")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        limit = thread_limit()
        if limit is None:
            return run(args.command, cfg, args.out)
        with threadpool_limits(limits=limit):
            return run(args.command, cfg, args.out)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError, ConvergenceError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, OperatorMismatch, DataMismatch, KeyError,
            json.JSONDecodeError) as err:
        print(f"input/output error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
