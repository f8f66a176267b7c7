"""Command-line entry points: fit parameter maps from intervention logs,
train classifiers and full policies, deploy episodes, run benchmarks, and
serve the live teleoperation session."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from .context import (
    ClassifierConfig,
    DEFAULT_FEATURES,
    feature_domain_box,
    featurize,
    net_to_dict,
    train_evidential_net,
)
from .intervention import InterventionRecord, build_dataset, record_from_log
from .learn import FIT_CMA_DEFAULTS, BCWeights, write_parameter_map
from .nav import DEFAULT_PARAMETERS, NavContext, ParameterSet
from .pipeline import (
    PredictorConfig,
    TrainedPolicy,
    dump_policy,
    fit_records,
    read_policy,
    run_episode,
    save_policy,
    train,
)
from .robot import Pose2D
from .teleop import DEFAULT_PORT, SessionConfig
from .world import default_goal_xy, generate_ca_world, read_grid, save_grid


def _load_records(paths: list[str], env_dir: str) -> tuple[list[InterventionRecord], list]:
    """Intervention logs reference their environment file; the global path
    each step saw is rebuilt from that environment under the default
    parameters (the autopilot the correction was recorded against)."""
    records = []
    envs = []
    grids: dict[str, object] = {}
    for path in paths:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
        header = json.loads(text.splitlines()[0])
        env_file = header.get("env_file", "")
        env_path = env_file if os.path.isabs(env_file) else os.path.join(env_dir, env_file)
        if not os.path.exists(env_path):
            raise SystemExit(f"{path}: environment file {env_path!r} not found")
        if env_path not in grids:
            grids[env_path] = read_grid(env_path)
        grid = grids[env_path]
        ctx = NavContext(grid)
        goal = default_goal_xy(grid)
        field = ctx.goal_field(DEFAULT_PARAMETERS.inflation_radius, goal)

        def path_provider(pose: Pose2D, _field=field, _pose_goal=goal):
            p = _field.path_from(pose.x, pose.y)
            if p is None:
                return np.array([[pose.x, pose.y], list(_pose_goal)])
            return p.waypoints

        records.append(record_from_log(text, path_provider=path_provider, goal=goal))
        envs.append(grid)
    return records, envs


def _add_common_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("logs", nargs="+", help="intervention log files (line JSON)")
    p.add_argument("--env-dir", default=".", help="directory holding the referenced .grid files")
    p.add_argument("--seed", type=int, default=0)


def cmd_fit(args) -> int:
    records, envs = _load_records(args.logs, args.env_dir)
    from dataclasses import replace

    cma = replace(FIT_CMA_DEFAULTS, seed=args.seed, budget=args.budget)
    fitted, infos = fit_records(records, envs, cma_config=cma, workers=args.workers)
    entries = {0: DEFAULT_PARAMETERS}
    for i, theta in enumerate(fitted, start=1):
        entries[i] = theta
    text = write_parameter_map(entries)
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(text)
    for info in infos:
        print(
            f"context {info['context']} ({info['itype']}): loss {info['loss']:.4g} "
            f"over {info['steps']} steps in {info['evaluations']} evaluations"
        )
    print(f"wrote {args.out}")
    return 0


def cmd_train_clf(args) -> int:
    records, _ = _load_records(args.logs, args.env_dir)
    dataset = build_dataset(records)
    X = np.array([featurize(x) for x, _ in dataset.items])
    labels = np.array([label - 1 for _, label in dataset.items])
    net, accuracy = train_evidential_net(
        X,
        labels,
        dataset.context_count,
        ClassifierConfig(),
        seed=args.seed,
        feature_hash=DEFAULT_FEATURES.hash(),
        feature_box=feature_domain_box(),
    )
    blob = net_to_dict(net)
    blob["feature_config"] = {
        "bins": DEFAULT_FEATURES.bins,
        "goal_cap": DEFAULT_FEATURES.goal_cap,
        "max_speed": DEFAULT_FEATURES.max_speed,
    }
    with open(args.out, "w", encoding="ascii") as fh:
        json.dump(blob, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    print(f"trained {dataset.context_count}-context classifier, accuracy {accuracy:.3f}; wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    records, envs = _load_records(args.logs, args.env_dir)
    cma = replace(FIT_CMA_DEFAULTS, seed=args.seed, budget=args.budget)
    policy = train(records, envs, cma_config=cma, seed=args.seed, fit_workers=args.workers)
    policy = TrainedPolicy(
        pmap=policy.pmap,
        net=policy.net,
        predictor=PredictorConfig(epsilon_u=args.epsilon_u, window=args.window),
        feature_config=policy.feature_config,
        provenance=policy.provenance,
    )
    save_policy(policy, args.out)
    print(f"trained policy with {policy.pmap.n_contexts} contexts; wrote {args.out}")
    return 0


def cmd_deploy(args) -> int:
    grid = read_grid(args.env)
    if args.policy:
        runner = read_policy(args.policy)
        if args.epsilon_u is not None or args.window is not None:
            runner = TrainedPolicy(
                pmap=runner.pmap,
                net=runner.net,
                predictor=PredictorConfig(
                    epsilon_u=args.epsilon_u if args.epsilon_u is not None else runner.predictor.epsilon_u,
                    window=args.window if args.window is not None else runner.predictor.window,
                    use_confidence=runner.predictor.use_confidence,
                ),
                feature_config=runner.feature_config,
                provenance=runner.provenance,
            )
    else:
        runner = DEFAULT_PARAMETERS
    result = run_episode(grid, runner, timeout_s=args.timeout, collect_log=True)
    out = args.out or "episode.jsonl"
    with open(out, "w", encoding="ascii") as fh:
        for line in result.log_lines:
            fh.write(line + "\n")
    print(f"outcome: {result.outcome} in {result.traversal_time_s:.2f} s; log: {out}")
    return 0 if result.reached else 1


def cmd_gen_env(args) -> int:
    grid = generate_ca_world(args.seed, fill_prob=args.fill_prob, smooth_iters=args.smooth_iters)
    save_grid(grid, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_bench_gen(args) -> int:
    envs = bench_mod.generate_suite(args.n, args.seed)
    bench_mod.save_suite(envs, args.out)
    print(f"wrote {len(envs)} environments to {args.out}")
    return 0


def cmd_bench_train(args) -> int:
    data = bench_mod.build_training_data(seed=args.seed)
    policies = bench_mod.train_variants(data, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for name, policy in policies.items():
        if policy is None:
            continue
        save_policy(policy, os.path.join(args.out, f"policy_{name}.json"))
    manifest = {"variants": sorted(policies), "seed": args.seed}
    with open(os.path.join(args.out, "variants.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"trained {sum(1 for p in policies.values() if p)} policies into {args.out}")
    return 0


def _load_policies(directory: str) -> dict[str, TrainedPolicy | None]:
    with open(os.path.join(directory, "variants.json"), "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    policies: dict[str, TrainedPolicy | None] = {}
    for name in manifest["variants"]:
        path = os.path.join(directory, f"policy_{name}.json")
        policies[name] = read_policy(path) if os.path.exists(path) else None
    return policies


def cmd_bench_run(args) -> int:
    envs = bench_mod.load_suite(args.suite)
    policies = _load_policies(args.policies)

    def progress(done, total):
        if done % 50 == 0 or done == total:
            print(f"  {done}/{total} trials", flush=True)

    table = bench_mod.run_matrix(
        envs,
        policies,
        runs_per_cell=args.runs,
        base_seed=args.seed,
        timeout_s=args.timeout,
        results_path=args.out,
        workers=args.workers,
        progress=progress,
    )
    total = sum(len(rows) for rows in table.rows.values())
    print(f"{total} trials recorded in {args.out}")
    return 0


def _table_from_results(path: str) -> bench_mod.TrialTable:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    rows = [json.loads(ln) for ln in lines[1:]]
    runs_per_cell = max((row["run"] for row in rows), default=0) + 1
    table = bench_mod.TrialTable(runs_per_cell=runs_per_cell, timeout_s=50.0)
    for row in rows:
        table.rows.setdefault((row["env"], row["variant"]), []).append(row)
    return table


def cmd_bench_report(args) -> int:
    table = _table_from_results(args.results)
    print(bench_mod.format_report(table, alpha=args.alpha, fmt=args.format), end="")
    return 0


def cmd_serve(args) -> int:
    from .server import serve

    grid = read_grid(args.env) if args.env else generate_ca_world(args.seed, fill_prob=0.36)
    config = SessionConfig(
        grid=grid,
        seed=args.seed,
        env_name=os.path.basename(args.env) if args.env else f"generated-{args.seed}",
    )
    print(f"serving teleop session on port {args.port}")
    serve(config, port=args.port, host=args.host, log_dir=args.log_dir, speed=args.speed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="navtune")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit planner parameters per intervention log")
    _add_common_training_flags(p)
    p.add_argument("--out", default="params.map")
    p.add_argument("--budget", type=int, default=FIT_CMA_DEFAULTS.budget)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train-clf", help="train the context classifier from logs")
    _add_common_training_flags(p)
    p.add_argument("--out", default="classifier.json")
    p.set_defaults(func=cmd_train_clf)

    p = sub.add_parser("train", help="fit parameters and classifier into a policy")
    _add_common_training_flags(p)
    p.add_argument("--out", default="policy.json")
    p.add_argument("--budget", type=int, default=FIT_CMA_DEFAULTS.budget)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--epsilon-u", type=float, default=0.8)
    p.add_argument("--window", type=int, default=21)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deploy", help="run one closed-loop episode")
    p.add_argument("env", help="environment .grid file")
    p.add_argument("--policy", help="policy JSON (omit to run the default parameters)")
    p.add_argument("--out", help="episode log path (line JSON per planner tick)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon-u", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--timeout", type=float, default=50.0)
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("gen-env", help="generate one cave environment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fill-prob", type=float, default=0.36)
    p.add_argument("--smooth-iters", type=int, default=4)
    p.add_argument("--out", default="env.grid")
    p.set_defaults(func=cmd_gen_env)

    bench_p = sub.add_parser("bench", help="benchmark suite tooling")
    bench_sub = bench_p.add_subparsers(dest="bench_command", required=True)

    p = bench_sub.add_parser("gen", help="generate a benchmark suite")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="suite")
    p.set_defaults(func=cmd_bench_gen)

    p = bench_sub.add_parser("train", help="train the seven planner variants from scripted corrections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="policies")
    p.set_defaults(func=cmd_bench_train)

    p = bench_sub.add_parser("run", help="run the trial matrix")
    p.add_argument("--suite", default="suite")
    p.add_argument("--policies", default="policies")
    p.add_argument("--runs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=50.0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default="matrix.jsonl")
    p.set_defaults(func=cmd_bench_run)

    p = bench_sub.add_parser("report", help="summarize a results file")
    p.add_argument("--results", default="matrix.jsonl")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--format", choices=("md", "csv"), default="md")
    p.set_defaults(func=cmd_bench_report)

    p = sub.add_parser("serve", help="serve the live teleoperation session")
    p.add_argument("--env", help="environment .grid file (default: generated)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--log-dir", default="interventions")
    p.add_argument("--speed", type=float, default=1.0)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
