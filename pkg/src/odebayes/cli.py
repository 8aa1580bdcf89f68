"""Command-line interface: ``odebayes simulate|fit|predict|loo``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .diagnostics import summarize
from .errors import ConfigError, DimensionMismatch, OdeBayesError
from .evaluation import BAND_PROBS, LogLikMatrix, LooResult, loo_report, posterior_predictive, predictive_bands, psis_loo
from .model import Dataset, simulate_data
from .models import TOY_TRUTH, make_model
from .ode import ForcingSchedule
from .samplers import run_chains
from .scenarios import PROSTATE_TREATMENT, prostate_hierarchy, split_holdout
from .target import PoolingStructure, build_target

DEFAULT_PREDICT_COUNT = 101

# simulation defaults per model kind: truth, number of groups, time grid
SIM_DEFAULTS = {
    "toy": (TOY_TRUTH, 6, (0.0, 48.0, 13)),
    "coral": ({"alpha": 0.8, "beta": 0.3, "gamma": 0.2, "mu": 0.1, "sigma": 0.02}, 3, (0.0, 14.0, 15)),
    "decay": ({"theta": 0.5, "sigma": 0.05}, 1, (0.0, 10.0, 11)),
    "prostate": (None, 10, (0.0, 36.0, 37)),
}


def _model(cfg: io.RunConfig):
    return make_model(cfg.model, cfg.model_overrides())


def _pooling(cfg: io.RunConfig, model):
    if cfg.pooling is None and not cfg.centred:
        return None
    return PoolingStructure(str(cfg.pooling or model.default_pooling).lower(), centred=cfg.centred)


def load_data(cfg: io.RunConfig) -> Dataset:
    if cfg.data is None:
        raise ConfigError("config needs [data] path")
    treatment = io.read_treatment_csv(cfg.resolve(cfg.treatment)) if cfg.treatment else None
    return io.read_dataset_csv(cfg.resolve(cfg.data), treatment)


def _finish(out_dir, command, cfg, files, t0, extra=None):
    """Write the manifest, keeping digests of artifacts from earlier commands in the same directory."""
    out_dir = Path(out_dir)
    prior = {}
    if io.verify_manifest(out_dir):
        prior = json.loads((out_dir / io.MANIFEST).read_text(encoding="utf-8")).get("artifacts", {})
    names = {Path(f).name for f in files}
    keep = [out_dir / n for n in prior if n not in names and (out_dir / n).exists()]
    return io.write_manifest(out_dir, command, cfg, list(keep) + list(files), time.perf_counter() - t0, extra)


# -- simulate ---------------------------------------------------------------


def cmd_simulate(cfg: io.RunConfig, stdout=sys.stdout):
    t0 = time.perf_counter()
    model = _model(cfg)
    truth, n_default, grid = SIM_DEFAULTS[cfg.model]
    n_groups = int(cfg.n_groups or n_default)
    if n_groups < 1:
        raise ConfigError("n_groups must be positive")
    times = cfg.sim_times.values() if cfg.sim_times else io.TimeGrid(*grid).values()
    out = Path(cfg.out)
    files = []
    if cfg.model == "prostate" and not cfg.truth:
        ds, _ = prostate_hierarchy(cfg.seed, n_groups, times)
    else:
        values = dict(truth or {})
        values.update(cfg.truth)
        missing = [n for n in model.space.names if n not in values]
        if missing:
            raise ConfigError(f"[simulate] truth lacks {missing}")
        theta = np.array([float(values[n]) for n in model.space.names])
        forcings = None
        if cfg.model == "prostate":
            forcings = [ForcingSchedule.from_intervals(PROSTATE_TREATMENT)] * n_groups
        ds = simulate_data(model, theta, times, n_groups=n_groups, seed=cfg.seed, forcings=forcings)
    files.append(io.write_dataset_csv(ds, out / "data.csv"))
    if any(g.forcing is not None for g in ds.groups):
        files.append(io.write_treatment_csv({g.group_id: g.forcing for g in ds.groups if g.forcing}, out / "treatment.csv"))
    _finish(out, "simulate", cfg, files, t0)
    print(f"wrote {ds.n_obs} observations ({ds.n_groups} groups) to {files[0]}", file=stdout)
    return files


# -- fit ---------------------------------------------------------------------


def cmd_fit(cfg: io.RunConfig, stdout=sys.stdout):
    t0 = time.perf_counter()
    model = _model(cfg)
    data = load_data(cfg)
    fit_data, held = split_holdout(data, cfg.holdout)
    target = build_target(model, fit_data, _pooling(cfg, model), cfg.solver_config())
    scfg = cfg.sampler_config()
    chains = run_chains(target, scfg)
    names = target.param_names()
    out = Path(cfg.out)
    files = [io.write_draws_csv(chains, names, out / "draws.csv")]
    unc = np.stack([c.draws_unconstrained for c in chains])
    cache = out / f"draws_{cfg.hash()[:12]}.npy"
    buf = _npy_bytes(unc)
    files.append(io.atomic_write(cache, buf))
    summary = summarize(chains, max_tree_depth=scfg.max_tree_depth, model_name=model.name)
    files.append(io.atomic_write(out / "summary.txt", summary.table()))
    files.append(io.atomic_write(out / "summary.csv", summary.to_csv()))
    eval_data = held if held is not None and held.n_obs else fit_data
    ll = LogLikMatrix.from_draws(target, unc.reshape(-1, target.dim), eval_data if held is not None else None)
    files.append(io.write_loglik_csv(ll, out / "loglik.csv"))
    files.append(io.write_labels_csv(ll.labels, eval_data.channel_names, out / "obs_labels.csv"))
    _finish(out, "fit", cfg, files, t0, {"n_excluded_draws": ll.n_excluded,
                                         "loglik_data": "held_out" if held is not None else "fitted"})
    stdout.write(summary.table())
    return files


def _npy_bytes(arr) -> bytes:
    import io as _io

    b = _io.BytesIO()
    np.save(b, np.ascontiguousarray(arr), allow_pickle=False)
    return b.getvalue()


# -- predict -----------------------------------------------------------------


def group_thetas_from_row(target, row):
    """Per-group constrained parameter vectors from one reported draw row."""
    n = target.model.space.n
    ns = len(target.shared)
    per = list(target.indep) + list(target.pooled)
    g = max(target.n_groups, 1)
    th = np.empty((g, n))
    th[:, list(target.shared)] = row[:ns]
    if per:
        block = np.asarray(row[ns:ns + target.n_groups * len(per)]).reshape(target.n_groups, len(per))
        th[:, per] = block
    return th


def cmd_predict(cfg: io.RunConfig, draws_path=None, stdout=sys.stdout):
    t0 = time.perf_counter()
    model = _model(cfg)
    data = load_data(cfg)
    fit_data, _ = split_holdout(data, cfg.holdout)
    target = build_target(model, fit_data, _pooling(cfg, model), cfg.solver_config())
    out = Path(cfg.out)
    draws_path = Path(draws_path) if draws_path else out / "draws.csv"
    names, draws, _, _ = io.read_draws_csv(draws_path)
    if names != target.param_names():
        raise DimensionMismatch(f"{draws_path}: draws have {len(names)} parameters, model expects {len(target.param_names())}")
    if cfg.predict_times is not None:
        ts = cfg.predict_times.values()
    else:
        lo = min(float(g.times[0]) for g in data.groups)
        hi = max(float(g.times[-1]) for g in data.groups)
        ts = np.linspace(lo, hi, DEFAULT_PREDICT_COUNT)
    ids = data.group_ids()
    if cfg.predict_group is not None:
        if cfg.predict_group not in ids:
            raise ConfigError(f"unknown group {cfg.predict_group!r}")
        chosen = [cfg.predict_group]
    elif target.pooling.mode == "complete":
        chosen = ids[:1]
    else:
        chosen = ids
    fit_ids = fit_data.group_ids()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 1])))
    chan = list(data.channel_names) or [str(c) for c in range(model.n_channels)]
    pct = [f"{100 * p:g}" for p in BAND_PROBS]
    header = ["group", "channel", "time"] + [f"y_mean_q{p}" for p in pct] + [f"y_pred_q{p}" for p in pct]
    lines = [",".join(header)]
    all_pred = []
    for gid in chosen:
        gi = fit_ids.index(gid)
        thetas = np.array([group_thetas_from_row(target, r)[gi if target.n_groups else 0] for r in draws])
        pred = posterior_predictive(model, thetas, ts, rng, fit_data.groups[gi], target.config)
        if pred.n_failed:
            print(f"Warning: {pred.n_failed} draw(s) skipped after solver failure (group {gid})", file=stdout)
        bm = predictive_bands(pred.y_mean)
        bp = predictive_bands(pred.y_pred)
        for c in range(model.n_channels):
            for j, t in enumerate(ts):
                vals = [io.fmt(v) for v in bm[:, c, j]] + [io.fmt(v) for v in bp[:, c, j]]
                lines.append(",".join([gid, chan[c], io.fmt(t)] + vals))
        all_pred.append(pred.y_pred)
    files = [io.atomic_write(out / "predict_bands.csv", "\n".join(lines) + "\n")]
    files.append(io.atomic_write(out / "predict_y_pred.npy", _npy_bytes(np.stack(all_pred))))
    _finish(out, "predict", cfg, files, t0)
    print(f"wrote predictive bands for {len(chosen)} group(s), {ts.size} times to {files[0]}", file=stdout)
    return files


# -- loo ---------------------------------------------------------------------


def load_loo(run_dir) -> LooResult:
    run_dir = Path(run_dir)
    values = io.read_loglik_csv(run_dir / "loglik.csv")
    labels = io.read_labels_csv(run_dir / "obs_labels.csv")
    n_exc = 0
    man = run_dir / io.MANIFEST
    if man.exists():
        n_exc = int(json.loads(man.read_text(encoding="utf-8")).get("n_excluded_draws", 0))
    return psis_loo(LogLikMatrix(values, labels, n_exc))


def cmd_loo(cfg: io.RunConfig, runs, stdout=sys.stdout):
    t0 = time.perf_counter()
    if not 1 <= len(runs) <= 2:
        raise ConfigError("loo takes one or two run directories")
    results = [load_loo(r) for r in runs]
    names = [Path(r).name or str(r) for r in runs]
    if len(results) == 2:
        text = loo_report(results[0], names[0]) + "\n" + loo_report(results[1], names[1], results[0], names[0])
    else:
        text = loo_report(results[0], names[0])
    out = Path(cfg.out)
    lines = ["obs_index,group,time,channel,elpd_loo,pareto_k"]
    r0 = results[0]
    for i, (lab, v, k) in enumerate(zip(r0.labels, r0.pointwise, r0.pareto_k)):
        lines.append(f"{i},{lab[0]},{io.fmt(lab[1])},{lab[2]},{io.fmt(v)},{io.fmt(k)}")
    files = [io.atomic_write(out / "loo.txt", text), io.atomic_write(out / "loo_pointwise.csv", "\n".join(lines) + "\n")]
    _finish(out, "loo", cfg, files, t0)
    stdout.write(text)
    return files


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odebayes", description="Bayesian inference for ODE models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="random seed (overrides config and ODEBAYES_SEED)")
        sp.add_argument("--out", type=Path, help="output directory (overrides config and ODEBAYES_OUT)")

    common(sub.add_parser("simulate", help="simulate a dataset"))
    common(sub.add_parser("fit", help="run MCMC and write draws, summary and log-likelihood"))
    sp = sub.add_parser("predict", help="posterior predictive bands from a draws file")
    common(sp)
    sp.add_argument("--draws", type=Path, help="draws CSV (default: OUT/draws.csv)")
    sp = sub.add_parser("loo", help="PSIS-LOO report for one run, or a comparison of two")
    common(sp)
    sp.add_argument("runs", nargs="+", type=Path, help="run directories holding loglik.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = io.RunConfig.load(args.config).with_overrides(args.seed, args.out)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "predict":
            cmd_predict(cfg, args.draws)
        else:
            if args.out is None and not os.environ.get(io.ENV_OUT):
                # keep the run's own manifest intact
                cfg.out = str(Path(args.runs[0]) / "loo")
            cmd_loo(cfg, args.runs)
    except (OdeBayesError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
