"""Experiment harness and command-line entry point.

Subcommands: gen-sessions (fixture generator), simulate (one verbose
episode), experiment (the full distribution-shift grid), analyze (aggregate
existing logs), verify (stabilizability and bound-constant report).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields
from multiprocessing import Pool
from pathlib import Path

import numpy as np
import yaml

from . import analysis, datagen
from .core import (DynamicsSpec, ExperimentConfig, SpecError,
                   assemble_dynamics, default_box_space, format_beta,
                   load_sessions, parse_beta, rng_stream, save_sessions,
                   uniform_cost)
from .env import (ChargingEnv, ChargingModel, FixedSequencePolicy, SolarModel,
                  run_episode)
from .mpc import MpcCore, MpcPolicy
from .nn import DdpgLearner, DdpgParams
from .ood import MetaPolicy, NnPolicy

VERSION = "evsched-0.1.0"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}
_INT_KEYS = {"episodes", "shift_episode", "T", "m", "batch", "buffer",
             "learn_every"}
_FLOAT_KEYS = {"delta_hours", "mu_eff", "beta_ctrl", "alpha_cost",
               "solar_pre_mean", "solar_pre_sd", "solar_post_mean",
               "solar_post_sd", "qp_tol", "lr", "tau_soft", "cost_scale"}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    unknown = set(raw) - _CONFIG_FIELDS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        # YAML 1.1 reads bare scientific notation like 1e-3 as a string, so
        # numeric keys are coerced explicitly.
        for key in _INT_KEYS & raw.keys():
            raw[key] = int(raw[key])
        for key in _FLOAT_KEYS & raw.keys():
            raw[key] = float(raw[key])
        if "normalize_rewards" in raw:
            raw["normalize_rewards"] = bool(raw["normalize_rewards"])
        if "beta_ood_grid" in raw:
            raw["beta_ood_grid"] = tuple(parse_beta(b)
                                         for b in raw["beta_ood_grid"])
        if "seeds" in raw:
            # Either an explicit list or a bare count of independent runs.
            if isinstance(raw["seeds"], int):
                raw["seeds"] = tuple(range(raw["seeds"]))
            else:
                raw["seeds"] = tuple(int(s) for s in raw["seeds"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key in ("sessions_pre", "sessions_post", "out_dir"):
        if key in raw:
            raw[key] = str((path.parent / raw[key]).resolve())
    try:
        return ExperimentConfig(**raw)
    except (SpecError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_model(cfg: ExperimentConfig) -> ChargingModel:
    dyn = DynamicsSpec(m=cfg.m, T=cfg.T, delta_hours=cfg.delta_hours,
                       mu_eff=cfg.mu_eff, beta_ctrl=cfg.beta_ctrl)
    cost = uniform_cost(cfg.T, cfg.m, cfg.alpha_cost)
    space = default_box_space(cfg.m)
    return ChargingModel(dyn=dyn, cost=cost, space=space)


def forecast_value(cfg: ExperimentConfig, regime: str) -> float:
    mode = cfg.solar_forecast
    if mode == "regime":
        return cfg.solar_pre_mean if regime == "pre" else cfg.solar_post_mean
    if mode == "pre":
        return cfg.solar_pre_mean
    if mode == "zero":
        return 0.0
    try:
        return float(mode)
    except (TypeError, ValueError):
        raise ConfigError(f"unknown solar_forecast mode {mode!r}") from None


# ---------------------------------------------------------------------------
# Cell execution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellSpec:
    config: ExperimentConfig
    beta: float
    seed: int
    cell_dir: str


def cell_name(beta: float, seed: int) -> str:
    return f"beta-{format_beta(beta)}_seed-{seed}"


def reference_mpc_actions(model, sessions, cfg, forecast):
    """Pure-baseline action sequence for one regime.

    The baseline never observes realized solar, so its actions are identical
    in every episode of the regime; a single rollout fixes them.
    """
    env = ChargingEnv(model, sessions, SolarModel(forecast, 0.0),
                      rng_stream(0, "reference"))
    policy = MpcPolicy(model, sessions, horizon_mode=cfg.horizon_mode,
                       solar_forecast=forecast, qp_tol=cfg.qp_tol)
    traj = run_episode(env, policy)
    return traj.actions


def run_cell(spec: CellSpec) -> dict:
    cfg = spec.config
    name = cell_name(spec.beta, spec.seed)
    try:
        out = Path(spec.cell_dir)
        out.mkdir(parents=True, exist_ok=True)
        model = build_model(cfg)
        sessions = {"pre": load_sessions(cfg.sessions_pre, cfg.T),
                    "post": load_sessions(cfg.sessions_post, cfg.T)}
        solar = {"pre": SolarModel(cfg.solar_pre_mean, cfg.solar_pre_sd),
                 "post": SolarModel(cfg.solar_post_mean, cfg.solar_post_sd)}
        learner = DdpgLearner(
            model.n, model.m, model.space,
            DdpgParams(lr=cfg.lr, batch=cfg.batch, tau_soft=cfg.tau_soft,
                       cost_scale=cfg.cost_scale),
            rng_stream(spec.seed, "learner-init"))
        learner.attach_buffer(cfg.buffer)
        learner_rng = rng_stream(spec.seed, "learner")
        explore_rng = rng_stream(spec.seed, "explore")

        reward_rows = []
        trust_rows = []
        policy = None
        regime_now = None
        ref_actions = {}
        denom = max(1, cfg.episodes - 1)
        for ep in range(cfg.episodes):
            regime = "pre" if ep < cfg.shift_episode else "post"
            if regime != regime_now:
                regime_now = regime
                fc = forecast_value(cfg, regime)
                core = MpcCore(model, sessions[regime],
                               horizon_mode=cfg.horizon_mode,
                               solar_forecast=fc, qp_tol=cfg.qp_tol)
                policy = MetaPolicy(model, sessions[regime], core, learner,
                                    beta_ood=spec.beta,
                                    explore_rng=explore_rng,
                                    learner_rng=learner_rng,
                                    solar_forecast=fc,
                                    learn_every=cfg.learn_every)
                if regime not in ref_actions:
                    ref_actions[regime] = reference_mpc_actions(
                        model, sessions[regime], cfg, fc)
            policy.progress = ep / denom
            env = ChargingEnv(model, sessions[regime], solar[regime],
                              rng_stream(spec.seed, "env", ep))
            traj = run_episode(env, policy)
            raw = -traj.total_cost
            ref_env = ChargingEnv(model, sessions[regime], solar[regime],
                                  rng_stream(spec.seed, "env", ep))
            ref_traj = run_episode(ref_env,
                                   FixedSequencePolicy(ref_actions[regime]))
            ref_cost = ref_traj.total_cost
            norm = raw / abs(ref_cost) if ref_cost != 0.0 else raw
            reward_rows.append([format_beta(spec.beta), spec.seed, ep,
                                repr(raw), repr(norm)])
            for rec in policy.records:
                gap = float(np.linalg.norm(rec.a_tilde - rec.a_bar))
                trust_rows.append([ep, rec.t, repr(gap), repr(rec.radius),
                                   repr(rec.lam), repr(abs(rec.td)),
                                   repr(rec.cum_td)])

        with (out / "rewards.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["beta", "seed", "episode", "reward_raw", "reward_norm"])
            w.writerows(reward_rows)
        with (out / "trust.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "t", "gap", "radius", "lambda", "td_abs",
                        "cum_td"])
            w.writerows(trust_rows)
        return {"cell": name, "status": "ok", "error": None}
    except Exception as exc:  # crash isolation: one cell must not sink the grid
        return {"cell": name, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> int:
    """Run the full (beta, seed) grid; returns the process exit code."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    cells = []
    for beta in cfg.beta_ood_grid:
        for seed in cfg.seeds:
            name = cell_name(beta, seed)
            cell_dir = out / "cells" / name
            specs.append(CellSpec(config=cfg, beta=beta, seed=seed,
                                  cell_dir=str(cell_dir)))
            cells.append({"cell": name, "beta": format_beta(beta),
                          "seed": seed, "dir": str(cell_dir),
                          "status": "pending"})
    manifest = {
        "version": VERSION,
        "config_hash": cfg.config_hash(),
        "betas": [format_beta(b) for b in cfg.beta_ood_grid],
        "seeds": list(cfg.seeds),
        "cells": cells,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True)
                             + "\n", encoding="utf-8")

    if workers is None:
        workers = min(len(specs), os.cpu_count() or 1)
    if workers > 1 and len(specs) > 1:
        with Pool(processes=workers) as pool:
            results = pool.map(run_cell, specs, chunksize=1)
    else:
        results = [run_cell(s) for s in specs]

    by_name = {r["cell"]: r for r in results}
    failed = 0
    for cell in manifest["cells"]:
        res = by_name[cell["cell"]]
        cell["status"] = res["status"]
        if res["error"]:
            cell["error"] = res["error"]
            failed += 1
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True)
                             + "\n", encoding="utf-8")
    if failed:
        print(f"{failed}/{len(results)} cells failed; see {manifest_path}",
              file=sys.stderr)
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# Analysis over completed runs
# ---------------------------------------------------------------------------

def default_windows(cfg: ExperimentConfig):
    pre = (3 * cfg.shift_episode // 4, cfg.shift_episode)
    post_len = cfg.episodes - cfg.shift_episode
    post = (cfg.episodes - max(1, post_len // 2), cfg.episodes)
    return pre, post


def collect_rows(out_dir: Path):
    manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
    reward_rows, trust_rows = [], []
    for cell in manifest["cells"]:
        if cell["status"] != "ok":
            continue
        cdir = Path(cell["dir"])
        with (cdir / "rewards.csv").open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                reward_rows.append(row)
        with (cdir / "trust.csv").open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                row["beta"] = cell["beta"]
                row["seed"] = cell["seed"]
                trust_rows.append(row)
    for row in reward_rows:
        row["beta"] = parse_beta(row["beta"])
    for row in trust_rows:
        row["beta"] = parse_beta(row["beta"])
    return manifest, reward_rows, trust_rows


def analyze(cfg: ExperimentConfig, pre_window=None, post_window=None) -> int:
    out_dir = Path(cfg.out_dir)
    dpre, dpost = default_windows(cfg)
    pre_window = pre_window or dpre
    post_window = post_window or dpost
    manifest, reward_rows, trust_rows = collect_rows(out_dir)
    if not reward_rows:
        print("no completed cells to analyze", file=sys.stderr)
        return 1
    summary = analysis.aggregate_metrics(reward_rows, trust_rows,
                                         pre_window=pre_window,
                                         post_window=post_window,
                                         use_norm=cfg.normalize_rewards)
    with (out_dir / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(analysis.summary_to_csv_rows(summary))
    # Merged per-episode rewards for the figure tool.
    reward_rows.sort(key=lambda r: (r["beta"], int(r["seed"]), int(r["episode"])))
    with (out_dir / "rewards.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta", "seed", "episode", "reward_raw", "reward_norm"])
        for r in reward_rows:
            w.writerow([format_beta(r["beta"]), r["seed"], r["episode"],
                        r["reward_raw"], r["reward_norm"]])
    for row in analysis.summary_to_csv_rows(summary):
        print(",".join(str(c) for c in row))
    return 0


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_gen_sessions(args) -> int:
    rng = rng_stream(args.seed, "gen-sessions", args.profile)
    sessions, log = datagen.generate_sessions(args.profile, args.count,
                                              args.m, args.T, rng)
    save_sessions(args.out, sessions)
    print(f"profile={args.profile} requested={log.requested} "
          f"placed={log.placed} omitted={log.omitted} -> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    regime = args.regime
    sessions = load_sessions(cfg.sessions_pre if regime == "pre"
                             else cfg.sessions_post, cfg.T)
    solar = (SolarModel(cfg.solar_pre_mean, cfg.solar_pre_sd) if regime == "pre"
             else SolarModel(cfg.solar_post_mean, cfg.solar_post_sd))
    fc = forecast_value(cfg, regime)
    beta = parse_beta(args.beta)
    learner = DdpgLearner(model.n, model.m, model.space,
                          DdpgParams(lr=cfg.lr, batch=cfg.batch,
                                     tau_soft=cfg.tau_soft,
                                     cost_scale=cfg.cost_scale),
                          rng_stream(args.seed, "learner-init"))
    learner.attach_buffer(cfg.buffer)
    if args.policy == "mpc":
        policy = MpcPolicy(model, sessions, horizon_mode=cfg.horizon_mode,
                           solar_forecast=fc, qp_tol=cfg.qp_tol,
                           collect_log=bool(args.mpc_log))
    elif args.policy == "nn":
        policy = NnPolicy(model, sessions, learner,
                          rng_stream(args.seed, "explore"),
                          rng_stream(args.seed, "learner"), solar_forecast=fc)
    else:
        core = MpcCore(model, sessions, horizon_mode=cfg.horizon_mode,
                       solar_forecast=fc, qp_tol=cfg.qp_tol)
        policy = MetaPolicy(model, sessions, core, learner, beta_ood=beta,
                            explore_rng=rng_stream(args.seed, "explore"),
                            learner_rng=rng_stream(args.seed, "learner"),
                            solar_forecast=fc)
    env = ChargingEnv(model, sessions, solar, rng_stream(args.seed, "env", 0))
    traj = run_episode(env, policy)
    if args.verbose:
        for t in range(model.T):
            print(f"t={t:3d} cost={traj.costs[t]:10.4f} "
                  f"a={np.array2string(traj.actions[t], precision=4)} "
                  f"e={np.array2string(traj.states[t + 1][:model.m], precision=3)}")
    print(f"policy={args.policy} beta={format_beta(beta)} seed={args.seed} "
          f"episode_cost={traj.total_cost:.6f} reward={-traj.total_cost:.6f}")
    if args.out:
        m = model.m
        with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = (["episode", "t"]
                      + [f"e_{i+1}" for i in range(m)]
                      + [f"b_{i+1}" for i in range(m)]
                      + [f"a_{i+1}" for i in range(m)]
                      + ["cost"] + [f"h_{i+1}" for i in range(m)])
            w.writerow(header)
            for t in range(model.T):
                row = ([0, t] + [repr(v) for v in traj.states[t]]
                       + [repr(v) for v in traj.actions[t]]
                       + [repr(traj.costs[t])]
                       + [repr(v) for v in traj.solar[t]])
                w.writerow(row)
        print(f"trajectory -> {args.out}")
    if args.mpc_log and isinstance(policy, MpcPolicy):
        m = model.m
        with Path(args.mpc_log).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "horizon", "iters", "obj"]
                       + [f"action_{i+1}" for i in range(m)])
            for t, horizon, iters, obj, a in policy.log:
                w.writerow([t, horizon, iters, repr(obj)]
                           + [repr(v) for v in a])
        print(f"mpc log -> {args.mpc_log}")
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.beta is not None:
        overrides["beta_ood_grid"] = tuple(parse_beta(b)
                                           for b in args.beta.split(","))
    if args.seeds is not None:
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.shift_episode is not None:
        overrides["shift_episode"] = args.shift_episode
    if args.out_dir is not None:
        overrides["out_dir"] = str(Path(args.out_dir).resolve())
    if overrides:
        cfg = ExperimentConfig(**{**cfg.__dict__, **overrides})
    code = run_experiment(cfg, workers=args.workers)
    if code == 0 and not args.no_analyze:
        analyze(cfg)
    return code


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    if args.out_dir is not None:
        cfg = ExperimentConfig(**{**cfg.__dict__,
                                  "out_dir": str(Path(args.out_dir).resolve())})
    windows = {}
    if args.pre_window:
        lo, hi = args.pre_window.split(":")
        windows["pre_window"] = (int(lo), int(hi))
    if args.post_window:
        lo, hi = args.post_window.split(":")
        windows["post_window"] = (int(lo), int(hi))
    return analyze(cfg, **windows)


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    report = analysis.verify_stabilizability(model.dyn, args.sigma_floor,
                                             window=args.window)
    print(f"sigma_min over {len(report.entries)} (t, t') pairs, "
          f"window {args.window}:")
    step = max(1, len(report.entries) // 12)
    for t, tp, sig in report.entries[::step]:
        print(f"  t={t:4d} t'={tp:4d} sigma_min={sig:.8f}")
    print(f"min sigma_min = {report.min_sigma:.8f}  floor = {report.floor}  "
          f"-> {'PASS' if report.passed else 'FAIL'}")
    A, _ = assemble_dynamics(model.dyn, 0)
    a_bar = float(np.linalg.norm(A, 2))
    b_bar = float(model.dyn.beta_ctrl.max())
    inputs = analysis.BoundInputs(a_bar=a_bar, b_bar=b_bar, w_bar=args.w_bar,
                                  mu_lb=model.cost.mu_lb,
                                  xi_ub=model.cost.xi_ub,
                                  sigma_lb=report.min_sigma)
    bound = analysis.roe_mpc_bound(inputs)
    print(f"bound inputs: A_bar={a_bar:.6f} B_bar={b_bar:.6f} "
          f"mu={inputs.mu_lb:.6f} xi={inputs.xi_ub:.6f} "
          f"sigma={inputs.sigma_lb:.6f}")
    print(f"sigma_lo={bound.sigma_lo:.6f} sigma_hi={bound.sigma_hi:.6f} "
          f"lam_bar={bound.lam_bar:.6f} C={bound.C:.6f}")
    print(f"expected-cost ratio bound: {bound.bound:.6e}")
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="evsched",
                                     description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-sessions", help="generate a session fixture file")
    p.add_argument("--profile", choices=datagen.PROFILES, required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--T", type=int, default=144)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_sessions)

    p = sub.add_parser("simulate", help="run one episode with one policy")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", choices=["mpc", "nn", "meta"], default="mpc")
    p.add_argument("--beta", default="1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regime", choices=["pre", "post"], default="pre")
    p.add_argument("--out", default=None)
    p.add_argument("--mpc-log", default=None,
                   help="per-step solver log CSV (mpc policy only)")
    p.add_argument("--verbose", action="store_true",
                   help="print every step of the episode")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run the full (beta, seed) grid")
    p.add_argument("--config", required=True)
    p.add_argument("--beta", default=None,
                   help="comma-separated override of the beta grid")
    p.add_argument("--seeds", default=None,
                   help="comma-separated override of the seed list")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--shift-episode", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--no-analyze", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("analyze", help="aggregate logs of a completed run")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--pre-window", default=None, help="lo:hi episode window")
    p.add_argument("--post-window", default=None, help="lo:hi episode window")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="stabilizability and bound constants")
    p.add_argument("--config", required=True)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--sigma-floor", type=float, default=1e-6)
    p.add_argument("--w-bar", type=float, default=45.0)
    p.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
