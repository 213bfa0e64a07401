"""Command-line front end.

Exit codes: 0 success, 2 invalid configuration or arguments (nothing
written), 3 simulation divergence (partial outputs written), 4 training
failure mid-run (partial record written).
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
import csv
import logging
import os
import sys

from .clf import io_lin_controller
from .config import ConfigError, load_config, parse_config
from .controllers import clf_qp_controller
from .episodic import (
    DaclyfError, build_setup, evaluate, load_estimator, run_daclyf, save_record, study_envelope, write_study_csv,
    write_trace,
)

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_TRAINING = 0, 2, 3, 4
SIMULATE_COLUMNS = ["controller", "plant", "ise", "max_err", "diverged", "steps"]


def _resolve(args):
    """Load the config and apply flag overrides; raises ConfigError."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if getattr(args, "episodes", None) is not None:
        cfg.schedule.episodes = args.episodes
    return cfg.validate()


def _write_metadata(out, cfg):
    with open(os.path.join(out, "run-metadata.ini"), "w") as fh:
        fh.write(cfg.to_ini())


def cmd_simulate(args):
    cfg = _resolve(args)
    setup = build_setup(cfg)
    plant = setup.model_true if args.plant == "perturbed" else setup.model_est
    if args.controller == "pd":
        controller, decomposition = setup.nominal, setup.base
    elif args.controller == "clf-qp":
        controller = clf_qp_controller(setup.base, setup.tp, setup.clf)
        decomposition = setup.base
    elif args.controller == "io-lin":
        controller, decomposition = io_lin_controller(setup.model_est, setup.tp, setup.clf), setup.base
    else:
        try:
            estimator = load_estimator(args.estimator, setup)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load estimator {args.estimator}: {exc}") from None
        controller = setup.augmented(estimator, args.trust)
        decomposition = controller.estimator.decomposition

    metrics, traj = evaluate(controller, plant, setup.tp, setup.eval_x0, cfg.trajectory.horizon,
                             **setup.rollout_kwargs())
    os.makedirs(args.out, exist_ok=True)
    _write_metadata(args.out, cfg)
    write_trace(os.path.join(args.out, "trajectory.csv"), traj, setup, decomposition)
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SIMULATE_COLUMNS)
        writer.writerow([args.controller, args.plant, repr(metrics.ise), repr(metrics.max_err),
                         str(int(metrics.diverged)), str(len(traj.inputs))])
    print(f"{args.controller} on {args.plant} plant: ise {metrics.ise:.6g}  max_err {metrics.max_err:.4g}"
          f"  diverged {metrics.diverged}")
    return EXIT_DIVERGED if metrics.diverged else EXIT_OK


def _print_header(baseline):
    print(f"pd baseline ise {baseline.ise:.6g}")
    print(f"{'episode':>7} {'trust':>7} {'explore':>7} {'ise':>12} {'max_err':>10} {'samples':>8} {'loss':>11}")


def _print_episode(e, record):
    if e.episode == 1:
        _print_header(record.baseline)
    m = e.metrics
    flag = " diverged" if m.diverged else ""
    print(f"{e.episode:>7d} {e.trust:>7.3f} {e.exploration:>7.3f} {m.ise:>12.6g} {m.max_err:>10.4g}"
          f" {e.dataset_size:>8d} {e.train_loss:>11.4e}{flag}", flush=True)


def cmd_daclyf(args):
    cfg = _resolve(args)
    try:
        record = run_daclyf(cfg, progress=_print_episode)
    except DaclyfError as exc:
        save_record(exc.record, args.out, status=f"failed: {exc}")
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    save_record(record, args.out)
    return EXIT_OK


def _study_instance(cfg_text, seed, out):
    """Run one study instance in its own directory; returns (seed, status, ises)."""
    cfg = parse_config(cfg_text)
    cfg.run.seed = seed
    try:
        record = run_daclyf(cfg)
        status = "complete"
    except DaclyfError as exc:
        record, status = exc.record, f"failed: {exc}"
    save_record(record, out, status=status)
    return seed, status, [e.metrics.ise for e in record.episodes]


def cmd_study(args):
    if args.instances < 1:
        raise ConfigError("--instances must be at least 1")
    cfg = _resolve(args)
    text = cfg.to_ini()
    jobs = [(text, (cfg.run.seed + i) % 2 ** 64, os.path.join(args.out, f"instance-{i:02d}")) for i in range(args.instances)]
    os.makedirs(args.out, exist_ok=True)
    _write_metadata(args.out, cfg)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_study_instance, *zip(*jobs)))
    else:
        results = [_study_instance(*job) for job in jobs]

    completed = [ises for _, status, ises in results if status == "complete"]
    for seed, status, ises in results:
        final = f"{ises[-1]:.6g}" if ises else "n/a"
        print(f"seed {seed}: {status}, final ise {final}")
    rows = study_envelope(completed)
    write_study_csv(os.path.join(args.out, "study.csv"), rows)
    for k, n, lo, mean, hi in rows:
        print(f"episode {k:>3d}  n={n}  min {lo:.6g}  mean {mean:.6g}  max {hi:.6g}")
    return EXIT_OK if completed else EXIT_TRAINING


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="daclyf", description="Episodic learning of CLF derivatives on a Segway.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-episode progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out):
        p.add_argument("--config", help="INI config file (defaults built in)")
        p.add_argument("--out", default=default_out, help="output directory")
        p.add_argument("--seed", type=_u64, help="override run.seed")

    sim = sub.add_parser("simulate", help="single rollout of one controller")
    common(sim, "out-simulate")
    sim.add_argument("--controller", choices=["pd", "clf-qp", "io-lin", "augmented"], default="pd")
    sim.add_argument("--plant", choices=["perturbed", "nominal"], default="perturbed",
                     help="simulate the perturbed (true) plant or the nominal model")
    sim.add_argument("--estimator", help="serialized estimator for --controller augmented")
    sim.add_argument("--trust", type=float, default=1.0, help="trust weight for --controller augmented")
    sim.set_defaults(func=cmd_simulate)

    run = sub.add_parser("daclyf", help="one episodic learning run")
    common(run, "out-daclyf")
    run.add_argument("--episodes", type=_positive)
    run.set_defaults(func=cmd_daclyf)

    study = sub.add_parser("study", help="repeat the learning run over seeded instances")
    common(study, "out-study")
    study.add_argument("--episodes", type=_positive)
    study.add_argument("--instances", type=int, default=10)
    study.add_argument("--jobs", type=_positive, default=1, help="instances run in parallel")
    study.set_defaults(func=cmd_study)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate" and args.controller == "augmented" and not args.estimator:
        parser.error("--controller augmented needs --estimator")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
