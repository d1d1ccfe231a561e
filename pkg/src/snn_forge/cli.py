"""``snn-forge run --config <path> [--set key=value ...] --out <dir>``

Exit codes: 0 success, 2 usage or invalid config, 3 divergence, 4 I/O.
``SNN_FORGE_THREADS`` caps the worker processes used by sweeps.
"""

import argparse
import sys

from . import config as cfgmod
from .errors import CheckpointError, ConfigError, DataFormatError, DivergenceError
from .experiments import run

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

# shorthand flag -> dotted config key
SHORTCUTS = {
    "mode": "mode",
    "tau": "init_tau",
    "vthr": "init_vthr",
    "init_vthr": "init_vthr",
    "sg": "sg.scale_mode",
    "shape": "sg.shape",
    "reset": "reset",
    "epochs": "optim.epochs",
    "seed": "seed",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="snn-forge", description="Spiking network experiment runner.")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. optim.lr=0.01; repeatable")
    r.add_argument("--out", default="snn-forge-out", help="output directory")
    r.add_argument("--mode", choices=cfgmod.RUN_MODES)
    r.add_argument("--tau", type=float)
    r.add_argument("--vthr", type=float)
    r.add_argument("--init-vthr", dest="init_vthr", type=float)
    r.add_argument("--sg", help="surrogate scaling mode: as, rs or trsg")
    r.add_argument("--shape", help="surrogate shape")
    r.add_argument("--reset", choices=("soft", "hard"))
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int)
    return parser


def resolve(args):
    """Config file, then ``--set`` overrides, then shorthand flags."""
    raw = cfgmod.load_config(args.config) if args.config else {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        raw = cfgmod.apply_override(raw, key.strip(), cfgmod.parse_value(value))
    for flag, key in SHORTCUTS.items():
        value = getattr(args, flag)
        if value is not None:
            raw = cfgmod.apply_override(raw, key, value)
    mode = raw.get("mode")
    # theory sweeps take their grid from the shorthand threshold and leak flags
    if mode == "theory":
        if args.tau is not None:
            raw = cfgmod.apply_override(raw, "theory.taus", [args.tau])
        if args.vthr is not None:
            raw = cfgmod.apply_override(raw, "theory.vthrs", [args.vthr])
    return cfgmod.from_dict(raw)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        cfg = resolve(args)
    except ConfigError as err:
        print(f"snn-forge: invalid config: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"snn-forge: cannot read config: {err}", file=sys.stderr)
        return EXIT_IO
    try:
        summary = run(cfg, args.out)
    except DivergenceError as err:
        print(f"snn-forge: diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError, DataFormatError) as err:
        print(f"snn-forge: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    print(f"snn-forge: {cfg.mode} finished ({summary.get('status')}), outputs in {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
