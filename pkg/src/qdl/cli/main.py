"""Command-line entry point: ``qdl <command> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import scenarios
from ..analysis import FilterSpec, FilterSpecError, butterworth_sos, filtfilt
from .config import ConfigError, ScenarioConfig, load_config, with_overrides
from .pipeline import (EXIT_CONFIG, EXIT_OK, compare, execute, read_matrix_csv,
                       write_matrix_csv)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qdl", description="Quantized-state microgrid simulation")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, sim=True):
        p.add_argument("--config", metavar="PATH",
                       help="scenario file, or the name of a bundled scenario")
        p.add_argument("--out", metavar="DIR", help="output directory (default from config)")
        if sim:
            p.add_argument("--event-cap", type=int, metavar="N")
            p.add_argument("--horizon", type=float, metavar="S")
        p.add_argument("--cutoff-hz", type=float, metavar="F")

    common(sub.add_parser("run", help="equilibrium, QDL run, reference run and comparison"))
    common(sub.add_parser("qdl", help="QDL engine only"))
    common(sub.add_parser("reference", help="Radau reference only"))
    common(sub.add_parser("compare", help="re-compare the artifacts in --out"), sim=False)
    f = sub.add_parser("filter", help="zero-phase low-pass a t,<states> CSV")
    common(f, sim=False)
    f.add_argument("--input", metavar="CSV", help="default: <out>/qdl_resampled.csv")
    f.add_argument("--order", type=int, default=6)
    common(sub.add_parser("report", help="print the deviation summary stored in --out"), sim=False)
    sub.add_parser("scenarios", help="list the bundled scenario files")
    return ap


def _load(args) -> ScenarioConfig:
    if args.config is None:
        cfg = ScenarioConfig()
    elif Path(args.config).exists():
        cfg = load_config(args.config)
    elif args.config in scenarios.names():
        cfg = load_config(scenarios.path(args.config))
    else:
        raise ConfigError(f"no such file or bundled scenario: {args.config}")
    return with_overrides(cfg, horizon=getattr(args, "horizon", None),
                          event_cap=getattr(args, "event_cap", None),
                          cutoff_hz=args.cutoff_hz, out_dir=args.out)


def _header(out: Path) -> list[str]:
    man = json.loads((out / "manifest.json").read_text())
    return [f"scenario={man['scenario']}", f"config_hash={man['config_hash']}",
            f"manifest_hash={man['manifest_hash']}"]


def _simulate(args) -> int:
    cfg = _load(args)
    man = execute(cfg, args.command, cfg.output.dir)
    ev = man.events
    if ev:
        print(f"{cfg.name}: {ev['total']} updates ({ev['internal']} internal, "
              f"{ev['external']} external)" + (f", truncated at t = {man.t_stop:.6g} s"
                                              if man.truncated else ""))
    if man.error:
        print(f"error in stage {man.error['stage']}: {man.error['message']}", file=sys.stderr)
    summary = Path(cfg.output.dir) / "summary.txt"
    if args.command == "run" and man.error is None and summary.exists():
        print("\n".join(l for l in summary.read_text().splitlines()[:20] if not l.startswith("#")))
    print(f"wrote {cfg.output.dir}/manifest.json")
    return man.exit_code


def _compare(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output.dir)
    man = json.loads((out / "manifest.json").read_text())
    labels, grid, ref = read_matrix_csv(out / "reference.csv")
    qlabels, qgrid, qdl = read_matrix_csv(out / "qdl_resampled.csv")
    if qlabels != labels or not np.array_equal(grid, qgrid):
        raise ConfigError("reference and QDL files cover different states or grids")
    per = man["events"]["per_atom"]
    updates = [sum(per[lab]) for lab in labels]
    cmp = compare(labels, grid, ref, qdl, updates, man["config"]["horizon"],
                  cfg.output.cutoff_hz, cfg.output.filter_order)
    hd = _header(out)
    cmp.unfiltered.write_csv(out / "deviation.csv", hd)
    text = cmp.unfiltered.summary()
    if cmp.filtered is not None:
        cmp.filtered.write_csv(out / "deviation_filtered.csv", hd)
        text += "\n\n" + cmp.filtered.summary()
    else:
        text += f"\n\nfilter {cmp.filter_note}"
    print(text)
    return EXIT_OK


def _filter(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output.dir)
    src = Path(args.input) if args.input else out / "qdl_resampled.csv"
    labels, grid, data = read_matrix_csv(src)
    fs = 1.0 / float(np.mean(np.diff(grid)))
    spec = FilterSpec(cfg.output.cutoff_hz, fs, args.order)
    y = filtfilt(butterworth_sos(spec), data, 3 * args.order)
    dst = out / (src.stem + "_filtered.csv")
    hd = _header(out) if (out / "manifest.json").exists() else []
    write_matrix_csv(dst, grid, labels, y, hd + [f"low-pass order {args.order}, "
                                                 f"cutoff {spec.cutoff:g} Hz"])
    print(f"wrote {dst}")
    return EXIT_OK


def _report(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output.dir)
    man = json.loads((out / "manifest.json").read_text())
    print(f"scenario {man['scenario']}  manifest {man['manifest_hash'][:16]}  "
          f"stages {man['stages']}")
    if man.get("events"):
        ev = man["events"]
        print(f"updates: {ev['total']} total, {ev['internal']} internal, {ev['external']} external"
              + ("  (truncated)" if man["truncated"] else ""))
    path = out / "summary.txt"
    if path.exists():
        print("\n".join(l for l in path.read_text().splitlines() if not l.startswith("#")))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "scenarios":
        for name in scenarios.names():
            print(f"{name:12s} {scenarios.path(name)}")
        return EXIT_OK
    handlers = {"run": _simulate, "qdl": _simulate, "reference": _simulate,
                "compare": _compare, "filter": _filter, "report": _report}
    try:
        return handlers[args.command](args)
    except (ConfigError, FilterSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, KeyError, ValueError) as exc:
        # missing or malformed input artifacts
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
