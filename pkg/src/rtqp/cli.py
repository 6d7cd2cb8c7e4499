"""Command line entry point: ``rtqp {simulate,attack,full,selftest}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .episode import EpisodeLog
from .harness import (AttackAbort, AttackOptions, ScenarioConfig, final_output, run_attack,
                      run_scenario, selftest)


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _anchor(text: str):
    if text in ("zero", "oracle"):
        return text
    return [float(t) for t in text.split(",")]


def _scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with ScenarioConfig fields")
    p.add_argument("--scenario", choices=("setpoint", "tracking"))
    p.add_argument("--steps", type=int, help="number of logged steps k = 0..steps-1")
    p.add_argument("--seed", type=int)
    p.add_argument("--permute", action="store_true", help="permute constraint rows")
    p.add_argument("--key-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--circle-phase", type=float)
    p.add_argument("--constancy-tol", type=float)
    p.add_argument("--output-dir", type=Path)


def _attack_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--anchor", type=_anchor, default="zero",
                   help="zero, oracle or a comma-separated vector")
    p.add_argument("--k-set", type=_int_list, help="comma-separated steps sharing f, e")
    p.add_argument("--known-permutation-step", type=int)
    p.add_argument("--attack-tol", type=float, help="constancy tolerance for detection")


def _config(args) -> ScenarioConfig:
    d = json.loads(args.config.read_text()) if args.config else {}
    for key in ("scenario", "steps", "seed", "circle_phase"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.permute:
        d["permute"] = True
    if args.key_range is not None:
        d["key_range"] = args.key_range
    if args.constancy_tol is not None:
        d.setdefault("tolerances", {})["constancy"] = args.constancy_tol
    d.setdefault("scenario", "setpoint")
    out = args.output_dir if args.output_dir is not None else d.get("output_dir")
    d["output_dir"] = str(out if out is not None else Path("out") / d["scenario"])
    return ScenarioConfig.from_dict(d)


def _options(args, ep: EpisodeLog) -> AttackOptions:
    kw = dict(anchor=args.anchor, k_set=args.k_set,
              known_permutation_step=args.known_permutation_step)
    scen = ep.config.get("scenario")
    if scen is not None:
        opt = AttackOptions.from_scenario(ScenarioConfig.from_dict(scen), **kw)
    else:
        opt = AttackOptions(**kw)
    if args.attack_tol is not None:
        opt.constancy_tol = args.attack_tol
    return opt


def _summary(metrics) -> dict:
    return {"k_set": metrics.k_set, "period": metrics.spec.period_estimate,
            "spec1": metrics.spec.spec1, "max_abs_error": metrics.max_abs_error,
            "offset": metrics.offset.tolist(), "offset_std": metrics.offset_std.tolist(),
            "rank_report": list(metrics.rank_report),
            "permutation_recovery_rate": metrics.permutation_recovery_rate}


def _simulate(args) -> EpisodeLog:
    cfg = _config(args)
    ep, files = run_scenario(cfg)
    print(f"simulated {cfg.scenario} for {cfg.steps} steps, final position "
          f"{final_output(ep).round(6).tolist()}")
    for kind, path in files.items():
        print(f"  {kind}: {path}")
    return ep


def _attack(args, ep: EpisodeLog, output_dir) -> int:
    try:
        metrics = run_attack(ep, _options(args, ep), output_dir)
    except AttackAbort as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(json.dumps(_summary(metrics), indent=2))
    print(f"  metrics: {Path(output_dir) / 'metrics.json'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rtqp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the encrypted closed loop")
    _scenario_args(p)
    p = sub.add_parser("attack", help="attack a saved episode")
    p.add_argument("--input", type=Path, required=True, help="episode.json")
    p.add_argument("--output-dir", type=Path)
    _attack_args(p)
    p = sub.add_parser("full", help="simulate, then attack")
    _scenario_args(p)
    _attack_args(p)
    p = sub.add_parser("selftest", help="run quick invariant and round-trip checks")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        if args.command == "simulate":
            _simulate(args)
            return 0
        if args.command == "attack":
            ep = EpisodeLog.load(args.input)
            out = args.output_dir if args.output_dir is not None else args.input.parent
            return _attack(args, ep, out)
        if args.command == "full":
            ep = _simulate(args)
            return _attack(args, ep, ep.config["scenario"]["output_dir"])
        results = selftest(args.n, args.seed)
        for name, ok in results:
            print(f"{name:12s} {'pass' if ok else 'FAIL'}")
        return 0 if all(ok for _, ok in results) else 1
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
