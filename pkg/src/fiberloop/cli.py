"""Command-line entry point: ``fiberloop <command> ...``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
error; failures print one ``fiberloop: error kind=... message=...`` line on
stderr. Set ``FIBERLOOP_LOG`` to DEBUG, INFO or WARNING to change verbosity.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import dataset as ds
from . import evaluation as ev
from .config import parse_config, parse_deploy, with_seed
from .checkpoint import read_checkpoint
from .errors import ConfigParseError, ConfigValidationError, FiberloopError
from .render import write_svg
from .trainer import DeterministicPolicy, format_row, split_holdout, train

log = logging.getLogger("fiberloop")

TRIAL_FIELDS = ["trial", "mode", "condition", "init_id", "target_id", "mu", "obs_noise_std",
                "stiffness_scale", "length", "initial_e_mean", "final_e_mean", "final_e_max",
                "target_bend_energy", "converged", "failed"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _one_line(kind: str, message: str) -> str:
    return f"fiberloop: error kind={kind} message={json.dumps(' '.join(str(message).split()))}"


# --- output helpers ---------------------------------------------------------

def _write_csv(path: Path, rows, fields=None):
    rows = list(rows)
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(format_row(r))


def _write_metadata(out: Path, argv):
    # the only place a timestamp is written
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    (out / "metadata.txt").write_text(f"created={stamp} argv={json.dumps(list(argv))}\n")


def _write_trials(out: Path, trials, summary_rows, title):
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "trials.csv", [t.summary_row() for t in trials], TRIAL_FIELDS)
    _write_csv(out / "summary.csv", summary_rows)
    with open(out / "trials.jsonl", "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")
    write_svg(out / "trials.svg", trials, title)


def read_trials(path):
    with open(path, encoding="utf-8") as fh:
        return [ev.TrialResult.from_dict(json.loads(line)) for line in fh if line.strip()]


def _load_controller(path):
    policy, rod, env_config = DeterministicPolicy.from_checkpoint(path)
    return policy, rod, env_config


# --- commands -----------------------------------------------------------------

def cmd_dataset_gen(args, argv):
    cfg = with_seed(parse_config(args.config), args.seed)
    d = cfg.dataset
    data = ds.generate(d.grid, cfg.rod, seed=cfg.seed, state_points=d.state_points, ke_tol=d.ke_tol,
                       max_steps=d.max_steps, n_jobs=args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(data, out)
    print(f"wrote {len(data)} records to {out}")


def cmd_train(args, argv):
    cfg = with_seed(parse_config(args.config), args.seed)
    data = ds.load(args.dataset)
    if data.rod_params != cfg.rod:
        raise ConfigValidationError([f"dataset rod parameters {data.rod_params} differ from config {cfg.rod}"])
    env_config = replace(cfg.env, state_points=data.state_points)
    out = Path(args.out)
    est = train(data, env_config, cfg.ppo, cfg.seed, out, resume=args.resume,
                verbose=int(log.isEnabledFor(logging.INFO)))
    _write_metadata(out, argv)
    print(f"trained to level {est.curriculum_.level}; policy at {out / 'policy.bin'}")


def _eval_pairs(args, data, seed):
    by_id = {r.id: r for r in data.records}
    if args.init is not None or args.target is not None:
        if args.init is None or args.target is None:
            raise UsageError("--init and --target go together")
        try:
            return [(by_id[args.init], by_id[args.target])]
        except KeyError as exc:
            raise FiberloopError(f"record id {exc.args[0]} not in dataset") from exc
    meta = read_checkpoint(args.ckpt)[0]["meta"]
    if args.split_seed is None and meta.get("holdout_indices"):
        # records the checkpoint never trained on
        holdout = meta["holdout_indices"]
        if max(holdout) >= len(data):
            raise FiberloopError("checkpoint hold-out indices do not fit this dataset; pass --split-seed")
    else:
        split_seed = meta.get("seed", 0) if args.split_seed is None else args.split_seed
        _, holdout = split_holdout(len(data), args.holdout_fraction, split_seed)
    return ev.holdout_pairs(data, holdout, args.pairs, seed, same_branch=meta.get("same_branch", True))


def cmd_eval(args, argv):
    policy, rod, env_config = _load_controller(args.ckpt)
    deploy = parse_deploy(args.deploy) if args.deploy else ev.DeployConfig()
    seed = args.seed or 0
    data = ds.load(args.dataset)
    run = ev.run_closed_loop if args.mode == "closed" else ev.run_open_loop
    jobs = [(policy, rod, env_config, deploy, i, t, ev.seeding.int_seed(seed, "eval", k))
            for k, (i, t) in enumerate(_eval_pairs(args, data, seed))]
    trials = ev.run_trials(run, jobs, args.jobs)
    out = Path(args.out)
    summary = ev.summarize(trials)
    _write_trials(out, trials, [{"mode": args.mode, **summary}], f"{args.mode}-loop evaluation")
    _write_metadata(out, argv)
    print(f"{len(trials)} {args.mode}-loop trials, median final e_mean {summary['e_mean_median']:.4f} mm")


def cmd_experiment(args, argv):
    seed = args.seed or 0
    deploy = parse_deploy(args.deploy) if args.deploy else ev.DeployConfig()
    out = Path(args.out)
    if args.name == "bending" and args.trials:
        trials = read_trials(args.trials)
    else:
        if not args.ckpt:
            raise UsageError("the following arguments are required: --ckpt")
        policy, rod, env_config = _load_controller(args.ckpt)
        if args.name == "repeatability":
            if not args.dataset:
                raise UsageError("the following arguments are required: --dataset")
            data = ds.load(args.dataset)
            targets, inits = ev.select_repeatability_records(data, seed)
            trials, summary = ev.repeatability_experiment(policy, rod, env_config, deploy, targets, inits,
                                                          seed, args.jobs)
            _write_trials(out, trials, [summary], "repeatability")
            _write_metadata(out, argv)
            print(f"{len(trials)} trials; e_mean {summary['e_mean_mean'] * 1000:.0f} +- "
                  f"{summary['e_mean_std'] * 1000:.0f} um (hardware reference {summary['reference_e_mean_um']} um)")
            return
        trials, rows = ev.generalization_experiment(policy, rod, env_config, deploy, seed=seed, n_jobs=args.jobs)
        if args.name == "generalization":
            _write_trials(out, trials, rows, "generalization")
            _write_metadata(out, argv)
            print(f"{len(trials)} trials over {len(rows)} conditions")
            return
    training = ds.load(args.dataset) if args.dataset else None
    scatter, dist, rho = ev.bending_energy_analysis(trials, training)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bending_scatter.csv", scatter,
               ["trial", "condition", "target_id", "target_bend_energy", "final_e_mean"])
    _write_csv(out / "bending_distribution.csv", dist, ["group", "bend_energy"])
    _write_csv(out / "summary.csv", [{"n_trials": len(scatter),
                                      "spearman_rho": "not-applicable" if rho is None else rho}])
    _write_metadata(out, argv)
    print("spearman rho " + ("not-applicable" if rho is None else f"{rho:.4f}"))


def cmd_render(args, argv):
    trials = read_trials(args.trials)
    if args.limit is not None:
        trials = trials[:args.limit]
    path = write_svg(args.out, trials, args.title)
    print(f"wrote {path}")


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fiberloop", description="Simulated microfiber shape control: data, training, evaluation.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="override the configured root seed")
        return sp

    dsp = sub.add_parser("dataset", help="dataset operations")
    dsub = dsp.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    dsub.required = True
    gen = common(dsub.add_parser("gen", help="generate settled configurations"))
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--jobs", type=int, default=1)
    gen.set_defaults(func=cmd_dataset_gen)

    tr = common(sub.add_parser("train", help="train a policy with curriculum PPO"))
    tr.add_argument("--config", required=True)
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/last.bin")
    tr.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="deploy a checkpoint in a perturbed simulator"))
    e.add_argument("mode", choices=["closed", "open"])
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--deploy", help="file with a [deploy] section")
    e.add_argument("--init", type=int)
    e.add_argument("--target", type=int)
    e.add_argument("--pairs", type=int, default=20)
    e.add_argument("--holdout-fraction", type=float, default=0.1)
    e.add_argument("--split-seed", type=int, default=None,
                   help="recompute the hold-out split with this seed instead of reading it from the checkpoint")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    x = common(sub.add_parser("experiment", help="run an experiment protocol"))
    x.add_argument("name", choices=["repeatability", "generalization", "bending"])
    x.add_argument("--ckpt")
    x.add_argument("--dataset")
    x.add_argument("--deploy")
    x.add_argument("--trials", help="bending: reuse generalization trials.jsonl")
    x.add_argument("--out", required=True)
    x.add_argument("--jobs", type=int, default=1)
    x.set_defaults(func=cmd_experiment)

    r = sub.add_parser("render", help="draw trials.jsonl as SVG")
    r.add_argument("--trials", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--title", default="")
    r.add_argument("--limit", type=int)
    r.set_defaults(func=cmd_render)
    return p


def _setup_logging():
    level = os.environ.get("FIBERLOOP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(_one_line("usage", exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.func(args, argv)
    except UsageError as exc:
        print(_one_line("usage", exc), file=sys.stderr)
        return 2
    except (ConfigParseError, ConfigValidationError, FiberloopError, OSError, ValueError) as exc:
        print(_one_line(type(exc).__name__, exc), file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
