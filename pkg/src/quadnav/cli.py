"""Command-line entry point: ``quadnav {train,eval,sweep,plot,print-config}``."""

from __future__ import annotations

import argparse
import itertools
import sys
from pathlib import Path

from . import config as C
from .checkpoint import CheckpointError, load_policy, read_container, write_atomic
from .dynamics import SimulationDivergenceError
from .evalharness import (
    PerturbationConfig,
    evaluate,
    sweep_perturbations,
    write_reports_csv,
    write_trajectories,
)
from .plot import PlotInputError, plot_csv
from .ppo import PpoConfig, TrainingDivergenceError, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2

REFERENCE_PERTURBED_SUCCESS_CLAIM = "> 0.90 (reference claim; perturbation magnitudes unspecified)"


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _base_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    return cfg


def _finish_config(cfg: C.RunConfig, args, overrides) -> C.RunConfig:
    cfg = C.apply_overrides(cfg, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg


def cmd_train(args, overrides) -> int:
    try:
        cfg = _base_config(args)
        if args.resume:
            header, _ = read_container(args.resume)
            cfg.env = C.from_dict({"env": header["env_config"]}).env
            cfg.ppo = PpoConfig(**header["ppo_config"])
            cfg.seed = header["seed"]
            if args.seed is not None and args.seed != cfg.seed:
                raise C.ConfigError("--seed differs from the checkpoint's seed")
        cfg = _finish_config(cfg, args, overrides)
    except (C.ConfigError, CheckpointError) as err:
        _err(str(err))
        return EXIT_CONFIG

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.yaml", C.render(cfg).encode("utf-8"))
    print(f"training: {cfg.env.num_envs} envs, {cfg.ppo.total_env_steps} env-steps, "
          f"seed {cfg.seed}, output {out}")
    try:
        trainer = train(cfg.env, cfg.ppo, cfg.seed, out,
                        checkpoint_interval=cfg.checkpoint_interval,
                        resume=args.resume, config_hash=C.config_hash(cfg),
                        log=None if args.quiet else print)
    except (SimulationDivergenceError, TrainingDivergenceError) as err:
        _err(f"training diverged: {err}")
        return EXIT_DIVERGED
    except CheckpointError as err:
        _err(str(err))
        return EXIT_CONFIG
    print(f"done: {trainer.iteration} iterations, {trainer.env_steps} env-steps")
    return EXIT_OK


def _perturbation(args) -> PerturbationConfig:
    if args.wind_vec is not None:
        wind = tuple(args.wind_vec)
    else:
        wind = (args.wind, 0.0, 0.0)
    return PerturbationConfig(thrust_noise_std=args.thrust_noise, wind_force=wind,
                              wind_random_direction=args.wind_random_dir)


def _load_for_eval(path):
    policy, env_cfg, _ = load_policy(path)
    return policy, env_cfg


def cmd_eval(args, overrides) -> int:
    try:
        if overrides:
            raise C.ConfigError(f"unexpected arguments: {sorted(overrides)}")
        policy, env_cfg = _load_for_eval(args.checkpoint)
        pert = _perturbation(args)
    except (CheckpointError, C.ConfigError, ValueError) as err:
        _err(str(err))
        return EXIT_CONFIG
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    seed = 1000 if args.seed is None else args.seed
    report = evaluate(policy, env_cfg, args.episodes, pert, seed, record=args.record)
    write_reports_csv([report], out / "eval_report.csv")
    write_atomic(out / "eval_summary.txt", (report.summary() + "\n").encode("utf-8"))
    if args.record:
        write_trajectories(report, out)
    print(report.summary())
    return EXIT_OK


def cmd_sweep(args, overrides) -> int:
    try:
        if overrides:
            raise C.ConfigError(f"unexpected arguments: {sorted(overrides)}")
        policy, env_cfg = _load_for_eval(args.checkpoint)
        grid = [PerturbationConfig(thrust_noise_std=n, wind_force=(w, 0.0, 0.0),
                                   wind_random_direction=args.wind_random_dir)
                for n, w in itertools.product(args.thrust_noise, args.wind)]
    except (CheckpointError, C.ConfigError, ValueError) as err:
        _err(str(err))
        return EXIT_CONFIG
    out = Path(args.out or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    seed = 1000 if args.seed is None else args.seed
    reports = sweep_perturbations(policy, env_cfg, grid, args.episodes, seed)
    write_reports_csv(reports, out / "sweep_report.csv")
    text = "\n\n".join(r.summary() for r in reports)
    text += f"\n\nreference perturbed success rate: {REFERENCE_PERTURBED_SUCCESS_CLAIM}\n"
    write_atomic(out / "sweep_summary.txt", text.encode("utf-8"))
    print(text)
    return EXIT_OK


def cmd_plot(args, overrides) -> int:
    src = Path(args.input)
    if not src.is_file():
        _err(f"input file not found: {src}")
        return EXIT_CONFIG
    dest = Path(args.out) if args.out else src.with_suffix(".svg")
    try:
        svg, data = plot_csv(src, dest)
    except PlotInputError as err:
        _err(str(err))
        return EXIT_CONFIG
    print(f"wrote {svg} and {data}")
    return EXIT_OK


def cmd_print_config(args, overrides) -> int:
    try:
        cfg = _finish_config(_base_config(args), args, overrides)
    except C.ConfigError as err:
        _err(str(err))
        return EXIT_CONFIG
    sys.stdout.write(C.render(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (plot: output .svg path)")

    p = argparse.ArgumentParser(prog="quadnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common],
                       help="train a policy; extra --section.key value flags override the config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def eval_flags(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--episodes", type=int, default=256)
        sp.add_argument("--wind-random-dir", action="store_true",
                        help="random horizontal wind direction per episode")

    e = sub.add_parser("eval", parents=[common], help="deterministic evaluation")
    eval_flags(e)
    e.add_argument("--thrust-noise", type=float, default=0.0, help="std of thrust gain noise")
    e.add_argument("--wind", type=float, default=0.0, help="wind force magnitude in N (+x)")
    e.add_argument("--wind-vec", type=float, nargs=3, metavar=("FX", "FY", "FZ"))
    e.add_argument("--record", action="store_true", help="write trajectory_###.csv files")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="perturbation grid evaluation")
    eval_flags(s)
    s.add_argument("--thrust-noise", type=float, nargs="+", default=[0.0])
    s.add_argument("--wind", type=float, nargs="+", default=[0.0])
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", parents=[common], help="SVG of a metrics or trajectory CSV")
    pl.add_argument("input")
    pl.set_defaults(func=cmd_plot)

    pc = sub.add_parser("print-config", parents=[common], help="print the effective config")
    pc.set_defaults(func=cmd_print_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = C.parse_override_args(extra)
    except C.ConfigError as err:
        _err(str(err))
        return EXIT_CONFIG
    return args.func(args, overrides)


if __name__ == "__main__":
    sys.exit(main())
