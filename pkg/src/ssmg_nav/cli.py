"""Command line entry point: run, suite, plan, render, validate.

    ssmg-nav run --scenario apartment-A --seed 0 --out-dir out/
    ssmg-nav suite --out-dir out/suite
    ssmg-nav plan instance.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .harness import (ABLATIONS, EpisodeLog, Manifest, RunConfig, WriteError, compute_metrics,
                      format_report, render_episode, run_episode, run_suite)
from .planner import TooLarge, load_instance, solve
from .policy import ConfigError, PolicyConfig
from .sim_env import ParseError, ValidationError, load_scenario


def bundled_scenarios() -> Path:
    return Path(str(resources.files("ssmg_nav") / "scenarios"))


def resolve_scenario(name: str) -> Path:
    """A path, or the stem of a bundled scenario (``apartment-A``, ``suite-03``)."""
    p = Path(name)
    if p.exists():
        return p
    root = bundled_scenarios()
    for cand in (root / f"{name}.json", root / "suite" / f"{name}.json"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no scenario {name!r}")


def _config(args) -> RunConfig:
    policy = dict(tau=args.tau)
    if args.ablation:
        base = RunConfig.ablation(args.ablation)
        policy = {**base.policy.to_json(), **policy}
    if args.map:
        policy["map_mode"] = args.map
    if args.planner:
        policy["planner"] = args.planner
    if args.no_revisit:
        policy["revisit"] = False
    if args.no_persist:
        policy["persist"] = False
    return RunConfig(PolicyConfig(**policy), args.provider, args.oracle_sigma, args.remote_url,
                     args.budget)


def _add_config_flags(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--provider", default="cooccurrence",
                    choices=("cooccurrence", "oracle", "random", "remote"))
    ap.add_argument("--remote-url", default=None)
    ap.add_argument("--oracle-sigma", type=float, default=0.0)
    ap.add_argument("--tau", type=float, default=1.0, help="softmax temperature")
    ap.add_argument("--ablation", choices=sorted(ABLATIONS), default=None,
                    help="start from a named ablation row")
    ap.add_argument("--map", choices=("ssmg", "semantic-map", "value-map"), default=None)
    ap.add_argument("--planner", choices=("lhp", "greedy"), default=None)
    ap.add_argument("--no-revisit", action="store_true")
    ap.add_argument("--no-persist", action="store_true", help="clear memory between subtasks")
    ap.add_argument("--budget", type=int, default=500)


def cmd_run(args) -> int:
    path = resolve_scenario(args.scenario)
    world, start, goals = load_scenario(path)
    cfg = _config(args)
    log_ = run_episode(world, start, goals, cfg, args.seed, path.stem)
    for i, st in enumerate(log_.subtasks):
        print(f"subtask {i}: {st.outcome:<8} steps {st.steps:>3}  path {st.path_taken_m:6.2f} m"
              f"  shortest {st.shortest_m:6.2f} m  spl {st.spl:.3f}")
    if not log_.valid:
        print(f"episode invalid: {log_.error}", file=sys.stderr)
    rep = compute_metrics([log_])
    if rep is not None:
        print(f"s-SR {rep.s_sr:.3f}  e-SR {rep.e_sr:.3f}  SPL {rep.spl:.3f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{path.stem}_seed{args.seed}.jsonl").write_bytes(log_.to_bytes())
        render_episode(out, world, log_)
    return 0 if log_.valid else 1


def cmd_suite(args) -> int:
    manifest = Manifest.load(args.manifest or bundled_scenarios() / "suite" / "manifest.json")
    if args.seeds:
        manifest.seeds = args.seeds
    names = args.ablation or list(ABLATIONS)
    configs = {n: RunConfig.ablation(n, provider=args.provider, remote_url=args.remote_url,
                                     tau=args.tau) for n in names}
    reports = run_suite(manifest, configs)
    text = format_report(reports)
    print(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(
            {n: (r.to_json() if r else None) for n, r in reports.items()}, indent=1, sort_keys=True))
        (out / "summary.txt").write_text(text + "\n")
    return 0


def cmd_plan(args) -> int:
    inst = load_instance(args.instance)
    results = {}
    for method in ("nearest", "lhp", "brute"):
        try:
            results[method] = solve(inst, method, free_first=args.free_first)
        except TooLarge:
            continue
    best = results["lhp"]
    print(f"order {' '.join(str(i) for i in best.order)}")
    print(f"E {best.expected_cost:.6f}")
    for method, res in results.items():
        print(f"{method:<8} E {res.expected_cost:10.6f}  order {list(res.order)}")
    return 0


def cmd_render(args) -> int:
    log_ = EpisodeLog.from_lines(Path(args.log).read_text().splitlines())
    world, _, _ = load_scenario(resolve_scenario(args.scenario or log_.scenario))
    for f in render_episode(args.out_dir, world, log_):
        print(f)
    return 0


def cmd_validate(args) -> int:
    bad = 0
    for name in args.scenarios:
        try:
            path = resolve_scenario(name)
            world, _, goals = load_scenario(path)
        except (FileNotFoundError, ParseError, ValidationError) as exc:
            print(f"{name}: INVALID {exc}")
            bad += 1
            continue
        print(f"{name}: ok ({world.occupied.shape[1]}x{world.occupied.shape[0]} cells, "
              f"{len(world.objects)} objects, {len(goals)} subtasks)")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssmg-nav", description="skeleton-memory navigation harness")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one episode")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run ablation rows over a scenario manifest")
    p.add_argument("--manifest", default=None)
    p.add_argument("--ablation", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--provider", default="cooccurrence",
                   choices=("cooccurrence", "oracle", "random", "remote"))
    p.add_argument("--remote-url", default=None)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("plan", help="solve a visitation instance file")
    p.add_argument("instance")
    p.add_argument("--free-first", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("render", help="render an episode log")
    p.add_argument("--log", required=True)
    p.add_argument("--scenario", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("validate", help="check scenario files")
    p.add_argument("scenarios", nargs="+")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, WriteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
