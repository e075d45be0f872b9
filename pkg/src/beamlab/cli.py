"""``beamlab`` command line: train, eval, sweep, gradcheck, dump-posterior.

Exit codes: 0 success, 1 failed gradient check, 2 invalid configuration,
3 numeric blow-up during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .belief import PriorSpec, dump_posterior, make_prior
from .channel import sigma2_for_snr_db
from .config import ConfigError, read_json
from .experiment import EvalConfig, draw_trials, evaluate, simulate, write_csv, write_figure, write_json
from .policy import CheckpointError
from .train import LossSpec, TrainConfig, TrainingDivergence, gradcheck, train

log = logging.getLogger("beamlab")

MANIFEST_VERSION = 1


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _add_common(p, train_cmd=False):
    p.add_argument("--config", help="flat JSON config (or a manifest.json to replay)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--raw-snr-db", type=_float_list, help="comma-separated raw SNRs in dB")
    p.add_argument("--slots", type=_int_list, help="BA duration(s) b, comma-separated")
    p.add_argument("--prior", help="uniform | mixture")
    if train_cmd:
        p.add_argument("--loss", help="mmse | cam | camN")
        p.add_argument("--cam-order", type=int)
        p.add_argument("--steps", type=int)
    else:
        p.add_argument("--trials", type=int)
        p.add_argument("--policy", help="bisection | hpm[:depth] | neural:<checkpoint>, comma-separated")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="beamlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"beamlab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train", help="train a scan network"), train_cmd=True)
    _add_common(sub.add_parser("eval", help="evaluate policies"))
    _add_common(sub.add_parser("sweep", help="evaluate over SNR x duration, optionally emit a figure table"))
    _add_common(sub.add_parser("dump-posterior", help="write every posterior of one episode"))
    g = sub.add_parser("gradcheck", help="finite-difference check of episode gradients")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--n-bins", "-N", type=int, default=8)
    g.add_argument("--slots", "-b", type=int, default=2)
    g.add_argument("--loss", default="cam")
    g.add_argument("--cam-order", type=int, default=1)
    g.add_argument("--coords", type=int, default=64)
    return ap


def _load(args) -> dict:
    return read_json(args.config) if args.config else {}


def _override(data: dict, key: str, value, aliases=()):
    if value is None:
        return
    for a in aliases:
        data.pop(a, None)
    data[key] = value


def _train_config(args) -> TrainConfig:
    data = _load(args)
    _override(data, "seed", args.seed)
    if args.raw_snr_db is not None:
        _override(data, "raw_snr_db", args.raw_snr_db[0] if len(args.raw_snr_db) == 1 else args.raw_snr_db)
    if args.slots is not None:
        if len(args.slots) != 1:
            raise ConfigError("slots: training takes a single BA duration")
        _override(data, "slots", args.slots[0], aliases=("b",))
    _override(data, "prior", args.prior)
    _override(data, "loss", args.loss)
    _override(data, "cam_order", args.cam_order)
    _override(data, "steps", args.steps)
    return TrainConfig.from_dict(data)


def _eval_config(args) -> EvalConfig:
    data = _load(args)
    _override(data, "seed", args.seed)
    _override(data, "raw_snr_db", args.raw_snr_db)
    _override(data, "slots", args.slots, aliases=("b",))
    _override(data, "prior", args.prior)
    _override(data, "trials", args.trials)
    if args.policy is not None:
        _override(data, "policy", args.policy.split(","))
    return EvalConfig.from_dict(data)


def _manifest(out: Path, command: str, config: dict, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"manifest_version": MANIFEST_VERSION, "command": command, "tool_version": __version__,
           "seed": seed, "output_dir": str(out), "config": config}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    _manifest(out, "train", cfg.to_dict(), cfg.seed)
    try:
        train(cfg, out)
    except TrainingDivergence as exc:
        (out / "divergence_dump.json").write_text(json.dumps(exc.dump, indent=1) + "\n")
        print(f"error: {exc}; episode trace written to {out / 'divergence_dump.json'}", file=sys.stderr)
        return 3
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args, command="eval") -> int:
    cfg = _eval_config(args)
    out = Path(args.out)
    try:
        records = evaluate(cfg, threads=args.threads)
    except (CheckpointError, OSError) as exc:
        raise ConfigError(f"policy: {exc}") from exc
    _manifest(out, command, cfg.to_dict(), cfg.seed)
    write_csv(records, out / "metrics.csv")
    write_json(records, out / "metrics.json")
    if cfg.figure:
        write_figure(cfg.figure, out / f"{cfg.figure}.csv", records=records)
    for r in records:
        print(f"{r.policy:>12} snr={r.raw_snr_db:+.1f}dB b={r.b} beamwidth={r.expected_beamwidth_deg:.3f}"
              f"+-{r.ci95_beamwidth_deg:.3f}deg mmse={r.mmse_rad2:.5f} err={r.empirical_error_prob:.4f}")
    return 0


def cmd_dump_posterior(args) -> int:
    cfg = _eval_config(args)
    grid = cfg.grid
    prior = make_prior(PriorSpec.parse(cfg.prior), grid)
    b = cfg.slot_list[0]
    try:
        policy = cfg.policies[0].build(grid)
    except (CheckpointError, OSError) as exc:
        raise ConfigError(f"policy: {exc}") from exc
    draws = draw_trials(cfg.seed, [0], prior, grid, b)
    history = []
    simulate(policy, draws, prior, grid, b, float(sigma2_for_snr_db(cfg.snr_list[0], cfg.h, cfg.p)),
             cfg.h, cfg.p, history=history)
    out = Path(args.out)
    _manifest(out, "dump-posterior", cfg.to_dict(), cfg.seed)
    for i, stack in enumerate(history):
        with open(out / f"posterior_{i}.txt", "w") as fh:
            dump_posterior(stack[0], fh)
    print(f"true AoA {np.degrees(draws.psi[0]):.3f} deg; wrote {len(history)} posteriors to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if not 1 <= args.n_bins <= 16:
        raise ConfigError("n_bins: gradcheck is meant for small grids (N <= 16)")
    if args.slots < 0:
        raise ConfigError("slots: must be nonnegative")
    loss = LossSpec.parse(args.loss, args.cam_order)
    rep = gradcheck(args.seed, args.n_bins, args.slots, loss, n_coords=args.coords)
    status = "PASS" if rep.passed else "FAIL"
    print(f"gradcheck {status}: max relative error {rep.max_rel_err:.3e} over {rep.n_coords} coordinates "
          f"(tolerance {rep.tolerance:g}); worst coordinate {rep.worst_param}")
    return 0 if rep.passed else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "sweep": lambda a: cmd_eval(a, "sweep"),
        "dump-posterior": cmd_dump_posterior,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
