"""Command line entry point: ``sgqt run|compare|sweep|screen-dump``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import (
    PRESETS,
    RunConfig,
    compare_budgets,
    comparison_rows,
    resolve,
    run_ensemble,
    sweep,
    tomllib,
    write_outputs,
    write_sweep,
)
from .errors import ConfigError, TrialFailure, UnsupportedDimensionError
from .turbulence import fried_parameter, generate_screen, weak_turbulence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRIAL = 3


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _parse_seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named regime preset")
    common.add_argument("--seed", type=_parse_seed, help="master seed (overrides the config)")
    common.add_argument("--trials", type=int, help="number of trials")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key, e.g. noise.rate_hz=1e4")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sgqt", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("run", parents=[common], help="run an ensemble and write its quantile trace")
    sub.add_parser("compare", parents=[common],
                   help="SGQT against MUB tomography at equal copy budgets")
    sw = sub.add_parser("sweep", parents=[common], help="repeat a run over one config key")
    sw.add_argument("--over", required=True, help="dotted key, e.g. dimension or noise.copies_per_setting")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sd = sub.add_parser("screen-dump", parents=[common], help="write turbulence phase screens")
    sd.add_argument("--count", type=int, default=1)
    return p


def load_config(args) -> RunConfig:
    data = {}
    if args.config is not None:
        try:
            with open(args.config, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot load {args.config}: {exc}") from exc
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected KEY=VALUE, got {item!r}", "--set")
        data[key.strip()] = _parse_value(value.strip())
    if args.seed is not None:
        data["master_seed"] = args.seed
    if args.trials is not None:
        data["trials"] = args.trials
    if args.workers is not None:
        data["workers"] = args.workers
    return RunConfig.from_mapping(data, args.preset)


def _report(res, out: Path, stem: str) -> None:
    tr = res.trace
    print(f"{stem}: k={int(tr.k[-1])} copies={int(tr.copies[-1])} "
          f"infidelity median={tr.median[-1]:.3e} [q25={tr.q25[-1]:.3e}, q75={tr.q75[-1]:.3e}]")
    if res.baseline is not None:
        for row in comparison_rows(res):
            print(f"  copies={row['copies']:>10d} sgqt={row['sgqt_median']:.3e} "
                  f"baseline={row['baseline_median']:.3e} ratio={row['ratio']:.2f}")
    print(f"outputs in {out}")


def _screen_dump(cfg: RunConfig, count: int, out: Path) -> None:
    tcfg = resolve(cfg).turbulence or weak_turbulence(cfg.dimension, **cfg.turbulence)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.master_seed))
    for i in range(count):
        generate_screen(tcfg, rng).dump(out / f"screen_{i:04d}.bin")
    print(f"wrote {count} screen(s) of {tcfg.grid_size}x{tcfg.grid_size}, "
          f"r0={fried_parameter(tcfg):.3f} m, to {out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.verb == "run":
            res = run_ensemble(cfg)
            write_outputs(res, args.out)
            _report(res, args.out, "run")
        elif args.verb == "compare":
            res = compare_budgets(cfg.with_(mode="compare"))
            write_outputs(res, args.out, "compare")
            _report(res, args.out, "compare")
        elif args.verb == "sweep":
            values = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
            results = sweep(cfg, args.over, values)
            path = write_sweep(results, args.over, args.out)
            for v, res in results:
                _report(res, args.out, f"{args.over}={v}")
            print(f"sweep table: {path}")
        else:
            _screen_dump(cfg, args.count, args.out)
    except (ConfigError, UnsupportedDimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrialFailure as exc:
        print(f"{exc}\nreplay with --seed {exc.master_seed} and trial index {exc.trial}",
              file=sys.stderr)
        return EXIT_TRIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
