"""``daflow`` command line: generate data, fit, evaluate, run rate studies.

Exit codes: 0 success, 2 filter/training divergence, 3 configuration or
input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig, load_config
from .enkf import FilterDivergenceError
from .kalman import exact_loglik
from .metrics import (attractor_points, filter_means, rate_study, rmse_a, rmse_f,
                      sigma_beta, test_loglik)
from .models import BlowUpError, ThetaParams, build_problem
from .rng import make_rng
from .training import Trainer, TrainingDivergedError, TrainState
from .validation import check_seed

log = logging.getLogger("daflow")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG = 0, 2, 3

CHECKPOINT_NAME = "checkpoint_latest.bin"


def worker_count() -> int:
    raw = os.environ.get("DAFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"DAFLOW_THREADS must be an integer, got {raw!r}") from None


def data_dir(out: Path, cfg: ExperimentConfig, split: str = "train") -> Path:
    name = cfg.data.name if split == "train" else f"{cfg.data.name}-test"
    return out / "data" / name


def _reference(problem):
    return problem.reference_model, problem.reference_theta


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: ExperimentConfig, out: Path, seed: int) -> int:
    problem = build_problem(cfg.kind, cfg.model)
    model, theta = _reference(problem)
    for split, count in (("train", cfg.data.n_train), ("test", cfg.data.n_test)):
        directory = data_dir(out, cfg, split)
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            xs, ys = model.simulate(theta, cfg.data.T, make_rng(seed, "data", split, i))
            io.save_sequence(directory / f"seq_{i}.csv", xs, ys, cfg.hash)
    (out / "config.ini").write_text(cfg.text)
    log.info("wrote %d training and %d test sequences under %s",
             cfg.data.n_train, cfg.data.n_test, out / "data")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def save_state(path: Path, state: TrainState, cfg: ExperimentConfig, seed: int):
    arrays = {f"theta.{k}": v for k, v in state.theta.items()}
    opt = state.optimizer
    for key in ("m", "v"):
        if opt.get(key) is not None:
            arrays[f"opt.{key}"] = opt[key]
    meta = {"format": 1, "config_hash": cfg.hash, "epoch": state.epoch,
            "update": state.update, "seed": seed, "method": cfg.train.method,
            "optimizer_t": opt["t"], "rng": f"philox(seed={seed}, epoch-keyed)",
            "kind": cfg.kind, "blocks": [k for k in state.theta.keys()]}
    io.save_checkpoint(path, meta, arrays)


def load_state(path: Path) -> tuple[dict, TrainState]:
    meta, arrays = io.load_checkpoint(path)
    theta = ThetaParams({k: arrays[f"theta.{k}"] for k in meta["blocks"]})
    opt = {"t": meta["optimizer_t"], "m": arrays.get("opt.m"),
           "v": arrays.get("opt.v")}
    return meta, TrainState(theta, opt, meta["epoch"], meta["update"])


def cmd_fit(cfg: ExperimentConfig, out: Path, seed: int, resume: bool) -> int:
    problem = build_problem(cfg.kind, cfg.model)
    _, Y = io.load_dataset(data_dir(out, cfg))
    if Y.shape[-1] != problem.model.d_y:
        raise ConfigError(f"dataset has d_y={Y.shape[-1]}, model expects "
                          f"{problem.model.d_y}")
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    trainer = Trainer(problem.model, train_cfg, problem.alpha_ref)
    ckpt = out / CHECKPOINT_NAME
    train_csv = out / "train.csv"
    state = None
    if resume and ckpt.exists():
        meta, state = load_state(ckpt)
        if meta["config_hash"] != cfg.hash or meta["seed"] != seed:
            raise ConfigError("checkpoint was written with a different config or seed")
        log.info("resuming at epoch %d", state.epoch)
    else:
        for stale in (train_csv, ckpt):
            if stale.exists():
                stale.unlink()
    writer = io.CsvWriter(train_csv, io.TRAIN_COLUMNS, cfg.hash)

    def on_epoch(st, records):
        writer.write(r.row() for r in records)
        if st.epoch % max(1, cfg.checkpoint_every) == 0 or st.epoch == train_cfg.iterations:
            save_state(ckpt, st, cfg, seed)

    trainer.callback = on_epoch
    metrics = io.CsvWriter(out / "metrics.csv", io.METRIC_COLUMNS, cfg.hash)
    run_id = f"fit-{train_cfg.method}-{seed}"
    base = {"run_id": run_id, "N": train_cfg.N, "d_x": problem.model.d_x,
            "method": train_cfg.method, "seed": seed}
    try:
        state = trainer.fit(problem.theta0, Y, state)
    except TrainingDivergedError as exc:
        log.error("%s", exc)
        metrics.write([{**base, "metric": "diverged_epoch", "value": exc.epoch}])
        return EXIT_DIVERGED
    rows = []
    if trainer.records:
        rows.append({**base, "metric": "final_objective",
                     "value": trainer.records[-1].objective})
    dist = trainer.dist_to_ref(state.theta)
    if np.isfinite(dist):
        rows.append({**base, "metric": "alpha_err", "value": dist})
    q = np.asarray(problem.model.noise.cov(dict(state.theta.items())))
    rows.append({**base, "metric": "sigma_beta", "value": sigma_beta(q)})
    metrics.write(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def evaluate(problem, theta: ThetaParams, X, Y, Y_test, cfg: ExperimentConfig,
             seed: int) -> dict[str, float]:
    model = problem.model
    ref_model, ref_theta = _reference(problem)
    out = {}
    ev = cfg.eval
    taper = cfg.train.taper_radius
    if X.shape[-1] != model.d_x or Y.shape[-1] != model.d_y:
        raise ConfigError("dataset dimensions do not match the model")
    if not model.is_linear:
        ref_flow = lambda x: ref_model.transition({}, x)  # noqa: E731
        pts = attractor_points(ref_flow, model.d_x, make_rng(seed, "attractor"),
                               ev.attractor_points, ev.burn, ev.every)
        params = dict(theta.items())
        out["rmse_f"] = rmse_f(lambda x: model.transition(params, x), ref_flow, pts)
    means = filter_means(model, theta, Y, ev.N, seed, taper)
    out["rmse_a"] = rmse_a(means, X[:, 1:, :])
    if Y_test is not None and Y_test.size:
        out["test_loglik"] = test_loglik(model, theta, Y_test, ev.method, ev.N,
                                         seed, taper)
    out["sigma_beta"] = sigma_beta(np.asarray(model.noise.cov(dict(theta.items()))))
    if problem.alpha_ref is not None:
        out["alpha_err"] = float(np.linalg.norm(theta.alpha - problem.alpha_ref))
    if model.is_linear:
        out["exact_loglik"] = exact_loglik(model, theta, Y)
    return out


def cmd_eval(cfg: ExperimentConfig, out: Path, seed: int,
             checkpoint: Path | None = None) -> int:
    problem = build_problem(cfg.kind, cfg.model)
    ckpt = checkpoint or out / CHECKPOINT_NAME
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    _, state = load_state(ckpt)
    if state.theta.layout != problem.theta0.layout:
        raise ConfigError("checkpoint parameters do not match the configured model")
    X, Y = io.load_dataset(data_dir(out, cfg))
    test_dir = data_dir(out, cfg, "test")
    Y_test = io.load_dataset(test_dir)[1] if test_dir.exists() else None
    try:
        values = evaluate(problem, state.theta, X, Y, Y_test, cfg, seed)
    except (FilterDivergenceError, BlowUpError) as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    metrics = io.CsvWriter(out / "metrics.csv", io.METRIC_COLUMNS, cfg.hash)
    run_id = f"eval-{cfg.train.method}-{seed}"
    metrics.write({"run_id": run_id, "metric": k, "value": v, "N": cfg.eval.N,
                   "d_x": problem.model.d_x, "method": cfg.train.method,
                   "seed": seed} for k, v in values.items())
    for k, v in values.items():
        print(f"{k} = {v:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# rate study


def cmd_rate_study(cfg: ExperimentConfig, out: Path, seed: int) -> int:
    if cfg.kind != "linear":
        raise ConfigError("rate-study needs a linear model (kind = linear)")
    problem = build_problem("linear", cfg.model)
    rc = cfg.rate
    _, Y = problem.model.simulate(problem.reference_theta, rc.T,
                                  make_rng(seed, "rate-data"))
    if rc.point == "truth":
        theta = problem.reference_theta
    elif rc.point == "init":
        theta = problem.theta0
    else:
        raise ConfigError("rate.point must be 'truth' or 'init'")
    Ns = [int(n) for n in np.atleast_1d(rc.Ns)]
    variants = [(None, "")]
    if rc.taper_radius is not None:
        variants = ([(None, "")] if rc.compare_taper else []) + \
            [(float(rc.taper_radius), f"@taper{rc.taper_radius:g}")]
    rates = io.CsvWriter(out / "rates.csv", io.RATE_COLUMNS, cfg.hash)
    metrics = io.CsvWriter(out / "metrics.csv", io.METRIC_COLUMNS, cfg.hash)
    for radius, suffix in variants:
        res = rate_study(problem.model, theta, Y, Ns, rc.P, seed, radius,
                         workers=worker_count())
        for q, r in res.items():
            rates.write(r.rows(q + suffix))
            metrics.write([{"run_id": f"rate-{seed}", "metric": f"slope_{q}{suffix}",
                            "value": r.slope, "N": "", "d_x": problem.model.d_x,
                            "method": "enkf", "seed": seed}])
            print(f"{q}{suffix}: slope {r.slope:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate", "simulate training and test sequences"),
                        ("fit", "train a model on a generated dataset"),
                        ("eval", "evaluate a checkpoint"),
                        ("rate-study", "Monte-Carlo convergence study")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path, metavar="PATH")
        p.add_argument("--seed", type=int, default=None, metavar="U64")
        p.add_argument("--out", type=Path, default=Path("out"), metavar="DIR")
        p.add_argument("--resume", action="store_true",
                       help="continue from the latest checkpoint in --out")
        p.add_argument("--paper-literal-proposal", action="store_true",
                       help="PF proposal noise S_beta eps instead of the optimal one")
        p.add_argument("--checkpoint", type=Path, default=None,
                       help="checkpoint to evaluate (eval only)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.paper_literal_proposal:
            cfg.train = dataclasses.replace(cfg.train, literal_proposal=True)
        default_seed = {"generate": cfg.data.seed, "fit": cfg.train.seed,
                        "eval": cfg.eval.seed, "rate-study": cfg.rate.seed}
        seed = check_seed(args.seed if args.seed is not None
                          else default_seed[args.command])
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            return cmd_generate(cfg, out, seed)
        if args.command == "fit":
            return cmd_fit(cfg, out, seed, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, out, seed, args.checkpoint)
        return cmd_rate_study(cfg, out, seed)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"daflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"daflow: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FilterDivergenceError, BlowUpError, TrainingDivergedError) as exc:
        print(f"daflow: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
