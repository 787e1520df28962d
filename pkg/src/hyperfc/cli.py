"""Command-line interface: ``hyperfc {trim,train,eval,analyze,plot-data}``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure
(trim, training divergence), 4 file or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .airframe import ConfigError, load_airframe
from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, dump_config, load_config, train_setup
from .dynamics import IntegrationError, LowAirspeedError
from .evaluation import (PROTOCOLS, analysis_table, evaluate, lipschitz_report,
                         read_episode_log, replay_episode, report_dict, scenario_from_dict,
                         write_episode_log, write_history, write_report)
from .nets import Architecture, init_params
from .ppo import Trainer, TrainingError
from .reference import TrimError, solve_trim

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

KAPPA_MAX = 0.1    # 10 m radius
GAMMA_MAX = 0.5


class UsageError(ValueError):
    pass


def _print(msg=""):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_trim(args) -> int:
    if not np.isfinite(args.kappa) or abs(args.kappa) > KAPPA_MAX:
        raise UsageError(f"--kappa must be finite with |kappa| <= {KAPPA_MAX} 1/m")
    if not np.isfinite(args.gamma) or abs(args.gamma) > GAMMA_MAX:
        raise UsageError(f"--gamma must be finite with |gamma| <= {GAMMA_MAX} rad")
    af = load_airframe(args.airframe)
    trim = solve_trim(args.kappa, args.gamma, args.airspeed, af)
    bank_ref = np.degrees(np.arctan(args.airspeed**2 * args.kappa * np.cos(args.gamma) / af.g))
    _print(f"trim  kappa={args.kappa:g} 1/m  gamma={args.gamma:g} rad  V={args.airspeed:g} m/s")
    _print(f"  residual       {trim.residual:.3e}")
    _print(f"  body velocity  u={trim.v[0]:.4f} v={trim.v[1]:.4f} w={trim.v[2]:.4f} m/s")
    _print(f"  bank           {np.degrees(trim.bank):.3f} deg  (level-turn relation "
           f"{bank_ref:.3f} deg)")
    _print(f"  pitch          {np.degrees(trim.attitude[1]):.3f} deg")
    _print(f"  rates          p={trim.omega[0]:.5f} q={trim.omega[1]:.5f} r={trim.omega[2]:.5f}"
           " rad/s")
    dE, dA, dR, dT = trim.delta_cmd
    _print(f"  inputs         elevator={dE:.5f} aileron={dA:.5f} rudder={dR:.5f} rad  "
           f"throttle={dT:.3f}")
    if args.json:
        _print(json.dumps({"kappa": args.kappa, "gamma": args.gamma, "V": args.airspeed,
                           "residual": trim.residual, "bank": trim.bank,
                           "attitude": trim.attitude.tolist(), "omega": trim.omega.tolist(),
                           "v": trim.v.tolist(), "delta_cmd": trim.delta_cmd.tolist()}))
    return EXIT_OK


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.ppo.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "iterations", None) is not None:
        cfg.ppo.iterations = args.iterations
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    setup = train_setup(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved_config.yaml")
    trainer = Trainer(setup)
    if args.resume:
        if not trainer.latest_path.exists():
            raise FileNotFoundError(f"no checkpoint to resume from in {out}")
        trainer.resume()
        _print(f"resumed at iteration {trainer.iteration}")
    else:
        for p in (trainer.log_path, trainer.timing_path, trainer.episodes_path):
            if p.exists():
                p.unlink()

    def report(row):
        _print(f"iter {row['iteration']:4d}  episodes {row['episodes']:3d}  "
               f"return {row['mean_episode_return']:9.2f}  step reward "
               f"{row['mean_step_reward']:.4f}  kl {row['approx_kl']:.4f}  "
               f"clip {row['clip_fraction']:.3f}")

    trainer.train(report)
    _print(f"checkpoint: {trainer.latest_path}")
    return EXIT_OK


def _load_params(path):
    params, extra = load_checkpoint(path)
    return params, extra


def cmd_eval(args) -> int:
    params, extra = _load_params(args.checkpoint)
    if args.config is not None:
        cfg = load_config(args.config)
    elif "config" in extra and extra["config"]:
        from .config import config_from_dict
        cfg = config_from_dict(extra["config"])
    else:
        cfg = RunConfig()
    if cfg.architecture != params.arch.tag:
        raise ConfigError(f"checkpoint holds {params.arch.tag} but the config says "
                          f"{cfg.architecture}")
    # evaluation always uses the full disturbance set with failures on
    env_cfg = cfg.scenario
    af = load_airframe(cfg.airframe)
    n = args.episodes if args.episodes is not None else cfg.eval.episodes
    seed = args.seed if args.seed is not None else cfg.eval.seed
    out = Path(args.out or Path(cfg.out_dir) / "eval")
    deterministic = not args.stochastic
    if not deterministic:
        _print("note: stochastic policy evaluation (sampled actions)")
    for protocol in (PROTOCOLS if args.protocol == "both" else (args.protocol,)):
        report = evaluate(params, protocol, n, seed, env_cfg=env_cfg, airframe=af,
                          batch=cfg.eval.batch, deterministic=deterministic)
        paths = write_report(report, out)
        (out / f"{protocol}_report.json").write_text(json.dumps(report_dict(report), indent=1))
        _print(f"{protocol}: {n} episodes -> {paths['table']}")
        _print(f"  {'actuator':10s} {'MPE':>8s} {'MaxPE':>8s} {'WC':>8s} {'SD':>8s}")
        for row in report.rows:
            _print(f"  {row['actuator']:10s} {row['mpe_mean']:8.3f} {row['maxpe_mean']:8.3f} "
                   f"{row['wc']:8.3f} {row['maxpe_sd']:8.3f}")
        if args.log_worst:
            worst = max(report.episodes, key=lambda e: e["maxpe"])
            res = replay_episode(params, worst["seed"], scenario_from_dict(worst["scenario"]),
                                 env_cfg, af)
            path = out / f"{protocol}_worst_episode.jsonl"
            write_episode_log(path, res, {"protocol": protocol, "policy": params.arch.tag})
            _print(f"  worst-case episode log: {path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.checkpoint is None and not args.arch:
        raise UsageError("give --checkpoint or at least one --arch tag")
    targets = []
    if args.checkpoint is not None:
        targets.append(_load_params(args.checkpoint)[0])
    for tag in args.arch or ():
        targets.append(init_params(Architecture.from_tag(tag), np.random.default_rng(args.seed or 0)))
    rows, bounds = [], []
    _print(f"{'architecture':14s} {'params':>8s} {'FLOPs':>8s} {'hypernet bound':>15s}")
    for params in targets:
        row = analysis_table(params)
        rows.append(row)
        _print(f"{row['architecture']:14s} {row['params']:8d} {row['flops']:8d} "
               f"{row['hypernet_lipschitz']:15.6g}")
        bounds.extend(lipschitz_report(params))
    _print()
    _print(f"{'architecture':14s} {'network':10s} {'Lipschitz bound':>16s}")
    for b in bounds:
        _print(f"{b['architecture']:14s} {b['network']:10s} {b['bound']:16.6g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, data in (("analysis.csv", rows), ("lipschitz.csv", bounds)):
            with open(out / name, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(data[0]), lineterminator="\n")
                w.writeheader()
                w.writerows(data)
    return EXIT_OK


def cmd_plot_data(args) -> int:
    _, records = read_episode_log(args.log)
    if not records:
        raise ValueError(f"{args.log}: episode log has no steps")
    paths = write_history(records, args.out)
    for name, p in paths.items():
        _print(f"{name}: {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperfc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("trim", help="solve and print a trim condition")
    t.add_argument("--kappa", type=float, default=0.0, help="inverse turn radius, 1/m")
    t.add_argument("--gamma", type=float, default=0.0, help="flight-path angle, rad")
    t.add_argument("--airspeed", type=float, default=21.0)
    t.add_argument("--airframe", default=None)
    t.add_argument("--json", action="store_true", help="also print a JSON line")
    t.set_defaults(func=cmd_trim)

    tr = sub.add_parser("train", help="train a policy with PPO")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--out", default=None)
    tr.add_argument("--iterations", type=int, default=None)
    tr.add_argument("--resume", action="store_true")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--protocol", choices=(*PROTOCOLS, "both"), default="static")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--stochastic", action="store_true")
    e.add_argument("--log-worst", action="store_true",
                   help="replay and log the worst-case episode")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="parameter, FLOP and Lipschitz tables")
    a.add_argument("--checkpoint", default=None)
    a.add_argument("--arch", action="append", help="analyze a freshly initialized tag")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_analyze)

    pd = sub.add_parser("plot-data", help="state/control history CSVs from an episode log")
    pd.add_argument("--log", required=True)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrimError, TrainingError, LowAirspeedError, IntegrationError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
