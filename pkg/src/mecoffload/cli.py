"""Command-line interface.

Subcommands:
    train        -- one policy, one seed, metrics CSV + checkpoint + manifest
    compare      -- policy sweep across seeds with an aggregate summary
    sweep-users  -- total-cost scaling as the user count grows
    stress       -- the long-horizon energy-stressed preset
    match        -- run co-selection on a JSON instance (debugging aid)
    check        -- run the invariant/oracle self-check suites
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .config import (ALL_POLICIES, PRESETS, EnvConfig, TrainConfig,
                     apply_env_var_overrides, apply_value_overrides,
                     load_config)
from .coselect import SelectionInstance, co_select, matching_to_dict
from .harness import (emit_plot_script, read_manifest, run_checks,
                      run_compare_command, run_train_command, run_user_sweep)
from .trainer import Policy


def _parse_set_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve_configs(args) -> tuple[EnvConfig, TrainConfig]:
    if getattr(args, "manifest", None):
        doc = read_manifest(args.manifest)
        return doc["env"], doc["train"]
    if args.config:
        env_cfg, train_cfg = load_config(args.config)
    else:
        preset = PRESETS[args.preset]
        env_cfg, train_cfg = preset.env, preset.train
    env_cfg, train_cfg = apply_env_var_overrides(env_cfg, train_cfg)
    if args.set:
        env_cfg, train_cfg = apply_value_overrides(env_cfg, train_cfg,
                                                   _parse_set_overrides(args.set))
    if getattr(args, "episodes", None) is not None:
        train_cfg = replace(train_cfg, episodes=args.episodes)
    if getattr(args, "slots", None) is not None:
        env_cfg = replace(env_cfg, slots_per_episode=args.slots)
    return env_cfg, train_cfg


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--preset", default="paper", choices=sorted(PRESETS),
                     help="named configuration preset")
    sub.add_argument("--config", default=None,
                     help="JSON config file (overrides --preset)")
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override any config field")
    sub.add_argument("--episodes", type=int, default=None,
                     help="override the training episode count")
    sub.add_argument("--slots", type=int, default=None,
                     help="override the slots per episode")
    sub.add_argument("--verbose", action="store_true")
    sub.add_argument("--emit-plot-script", action="store_true",
                     help="write a self-contained plotting helper to --out")
    sub.add_argument("--manifest", default=None,
                     help="rerun from a previously written manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mecoffload",
        description="edge-offloading simulator and hybrid-decision trainer")
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="train one policy on one seed")
    _add_common(p_train)
    p_train.add_argument("--policy", default="ucms", choices=ALL_POLICIES)
    p_train.add_argument("--seed", type=int, default=0)

    p_cmp = subs.add_parser("compare", help="train all policies across seeds")
    _add_common(p_cmp)
    p_cmp.add_argument("--policies", nargs="+", default=list(ALL_POLICIES),
                       choices=ALL_POLICIES)
    p_cmp.add_argument("--seeds", type=int, default=10,
                       help="number of seeds (0..n-1)")
    p_cmp.add_argument("--seed-list", type=int, nargs="+", default=None,
                       help="explicit seed values (overrides --seeds)")

    p_sweep = subs.add_parser("sweep-users",
                              help="cost scaling as the user count grows")
    _add_common(p_sweep)
    p_sweep.add_argument("--policy", default="ucms", choices=ALL_POLICIES)
    p_sweep.add_argument("--n-start", type=int, default=12)
    p_sweep.add_argument("--n-stop", type=int, default=57)
    p_sweep.add_argument("--n-step", type=int, default=3)
    p_sweep.add_argument("--seeds", type=int, default=5)

    p_stress = subs.add_parser("stress",
                               help="long-horizon energy-stressed comparison")
    _add_common(p_stress)
    p_stress.add_argument("--policies", nargs="+", default=list(ALL_POLICIES),
                          choices=ALL_POLICIES)
    p_stress.add_argument("--seeds", type=int, default=10)

    p_match = subs.add_parser("match", help="co-select a JSON instance")
    p_match.add_argument("instance", help="path to the instance JSON")
    p_match.add_argument("--verbose", action="store_true",
                         help="include the per-round event log")
    p_match.add_argument("--no-fallback", action="store_true",
                         help="fail instead of assigning leftovers locally")

    p_check = subs.add_parser("check", help="run the self-check suites")
    p_check.add_argument("names", nargs="*", help="subset of checks to run")

    return parser


def cmd_train(args) -> int:
    env_cfg, train_cfg = _resolve_configs(args)
    if getattr(args, "manifest", None):
        doc = read_manifest(args.manifest)
        policy = Policy.from_name(doc["policies"][0])
        seed = int(doc["seeds"][0])
    else:
        policy = Policy.from_name(args.policy)
        seed = args.seed
    paths = run_train_command(env_cfg, train_cfg, policy, seed, args.out,
                              verbose=args.verbose)
    if args.emit_plot_script:
        emit_plot_script(args.out)
    print(f"wrote {paths['csv']}")
    if paths["checkpoint"]:
        print(f"wrote {paths['checkpoint']}")
    return 0


def cmd_compare(args, stress: bool = False) -> int:
    if stress:
        args.preset = "stress"
    env_cfg, train_cfg = _resolve_configs(args)
    if args.manifest:
        doc = read_manifest(args.manifest)
        policies, seeds = doc["policies"], doc["seeds"]
    else:
        policies = args.policies
        seeds = args.seed_list if getattr(args, "seed_list", None) \
            else list(range(args.seeds))
    agg = run_compare_command(env_cfg, train_cfg, policies, seeds, args.out)
    if args.emit_plot_script:
        emit_plot_script(args.out)
    for policy, rate in sorted(agg["win_rates"].items()):
        print(f"win rate {agg['reference']} vs {policy}: {rate:.2f}")
    print(f"wrote {args.out}/summary.json")
    return 0


def cmd_sweep_users(args) -> int:
    env_cfg, train_cfg = _resolve_configs(args)
    if args.manifest:
        doc = read_manifest(args.manifest)
        counts = doc["user_counts"]
        seeds = doc["seeds"]
        policy = Policy.from_name(doc["policies"][0])
    else:
        counts = list(range(args.n_start, args.n_stop + 1, args.n_step))
        seeds = list(range(args.seeds))
        policy = Policy.from_name(args.policy)
    rows = run_user_sweep(env_cfg, train_cfg, policy, counts, seeds, args.out)
    for row in rows:
        print(f"N={row['num_users']:3d} mean_total_cost={row['mean_total_cost']:.3f}")
    if args.emit_plot_script:
        emit_plot_script(args.out)
    return 0


def cmd_match(args) -> int:
    with open(args.instance, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    delay = np.asarray(doc["delay_est"], dtype=float)
    energy = np.asarray(doc["energy_est"], dtype=float)
    users = tuple(doc.get("user_ids", range(delay.shape[0])))
    servers = tuple(doc.get("server_ids", range(delay.shape[1])))
    instance = SelectionInstance(
        user_ids=users, server_ids=servers, delay_est=delay, energy_est=energy,
        z_max=int(doc["z_max"]), rho1=float(doc.get("rho1", 0.5)),
        rho2=float(doc.get("rho2", 0.5)))
    matching = co_select(instance,
                         allow_local_fallback=not args.no_fallback,
                         record_rounds=args.verbose)
    print(json.dumps(matching_to_dict(matching), indent=2, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train":
        return cmd_train(args)
    if args.command == "compare":
        return cmd_compare(args)
    if args.command == "sweep-users":
        return cmd_sweep_users(args)
    if args.command == "stress":
        args.seed_list = None
        return cmd_compare(args, stress=True)
    if args.command == "match":
        return cmd_match(args)
    if args.command == "check":
        return run_checks(args.names or None)
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
